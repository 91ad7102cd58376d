/** Dashboard state and its pure transitions; rendering reads, never writes.
 *
 * Every displayed number is a field of the last successful poll; the only
 * client-side arithmetic is percentage formatting.
 */

import type {
  FunnelJson,
  MgmtHealthJson,
  SessionSummaryJson,
  VerifyResponseJson,
} from "./types.js";

/** Consecutive failed polls (or an Unreachable target) that raise the banner. */
export const ALARM_AFTER_FAILURES = 3;

export interface Toast {
  kind: "success" | "error";
  text: string;
}

export interface DashboardState {
  funnel: FunnelJson | null;
  sessions: SessionSummaryJson[];
  health: MgmtHealthJson | null;
  lastPollTs: number | null;
  /** consecutive polls that failed since the last success */
  staleCount: number;
  /** session id with a verification in flight, if any */
  verifying: string | null;
  /** session id -> reward total, verified from this console */
  rewarded: Record<string, string>;
  toast: Toast | null;
}

export function initialState(): DashboardState {
  return {
    funnel: null,
    sessions: [],
    health: null,
    lastPollTs: null,
    staleCount: 0,
    verifying: null,
    rewarded: {},
    toast: null,
  };
}

export interface PollPayload {
  funnel: FunnelJson;
  sessions: SessionSummaryJson[];
  health: MgmtHealthJson;
  now: number;
}

export function applyPollSuccess(s: DashboardState, p: PollPayload): DashboardState {
  return {
    ...s,
    funnel: p.funnel,
    sessions: p.sessions,
    health: p.health,
    lastPollTs: p.now,
    staleCount: 0,
  };
}

export function applyPollFailure(s: DashboardState): DashboardState {
  return { ...s, staleCount: s.staleCount + 1 };
}

export function bannerVisible(s: DashboardState): boolean {
  if (s.staleCount >= ALARM_AFTER_FAILURES) return true;
  const targets = s.health?.targets ?? [];
  return targets.some((t) => t.state === "Unreachable" || t.alarm);
}

/** Data older than 3 poll intervals gets flagged even before the banner. */
export function isStale(s: DashboardState, now: number, pollMs: number): boolean {
  if (s.lastPollTs === null) return false;
  return now - s.lastPollTs > 3 * pollMs;
}

/** Sessions awaiting a code check: offboarding, not yet rewarded here. */
export function pendingVerifications(s: DashboardState): SessionSummaryJson[] {
  return s.sessions.filter(
    (row) => row.state === "Offboarding" && !(row.session_id in s.rewarded),
  );
}

export function percent(rate: number): number {
  return Math.round(rate * 100);
}

export function beginVerify(s: DashboardState, sessionId: string): DashboardState {
  return { ...s, verifying: sessionId, toast: null };
}

export function applyVerifyResult(
  s: DashboardState,
  sessionId: string,
  result: VerifyResponseJson,
): DashboardState {
  if (result.verified && result.reward) {
    return {
      ...s,
      verifying: null,
      rewarded: { ...s.rewarded, [sessionId]: result.reward.total_usd },
      toast: { kind: "success", text: `rewarded ${result.reward.total_usd}` },
    };
  }
  return {
    ...s,
    verifying: null,
    toast: { kind: "error", text: result.reason ?? "verification failed" },
  };
}

/** Network failure: keep the session pending so the operator can retry. */
export function applyVerifyError(s: DashboardState, message: string): DashboardState {
  return {
    ...s,
    verifying: null,
    toast: { kind: "error", text: `request failed, retry: ${message}` },
  };
}
