/** JSON shapes of the service HTTP API, as the dashboard consumes them. */

export interface FunnelCellJson {
  accessed: number;
  capable: number;
  completed: number;
  /** capable / accessed, already rounded server side */
  capable_rate: number;
  /** completed / capable */
  completion_rate: number;
}

export interface FunnelBreakdownJson extends FunnelCellJson {
  os: string;
  browser: string;
}

export interface FunnelJson {
  total: FunnelCellJson;
  cells: FunnelBreakdownJson[];
}

export interface SessionSummaryJson {
  session_id: string;
  participant_id: string;
  treatment: string;
  state: string;
  os: string;
  browser: string;
  capable: boolean;
  created_ts_ms: number;
  updated_ts_ms: number;
  trials_total: number;
  trials_reconstructed: number;
  last_code: string;
  events: number;
}

export interface HealthTargetJson {
  target: string;
  state: string;
  consecutive_failures: number;
  uptime_s?: number;
  alarm: boolean;
}

export interface MgmtHealthJson {
  targets: HealthTargetJson[];
  alarms_on_record: number;
}

export interface RewardJson {
  base_usd: string;
  bonus_usd: string;
  total_usd: string;
  duration_min: number;
}

export interface VerifyResponseJson {
  verified: boolean;
  reward?: RewardJson;
  reason?: string;
}

export interface DashboardConfig {
  endpoint: string;
  poll_ms: number;
}
