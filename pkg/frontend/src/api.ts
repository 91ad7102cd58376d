/** Thin typed client over fetch; every dashboard number comes through here. */

import type {
  FunnelJson,
  MgmtHealthJson,
  SessionSummaryJson,
  VerifyResponseJson,
} from "./types.js";

/** The slice of fetch the client needs; tests inject a fake. */
export type FetchLike = (
  url: string,
  init?: { method?: string; headers?: Record<string, string>; body?: string },
) => Promise<{ ok: boolean; status: number; json(): Promise<unknown> }>;

export class ApiError extends Error {
  constructor(readonly status: number, readonly url: string) {
    super(`HTTP ${status} from ${url}`);
  }
}

export class ApiClient {
  private readonly base: string;
  private readonly fetchFn: FetchLike;

  constructor(endpoint: string, fetchFn?: FetchLike) {
    this.base = endpoint.replace(/\/+$/, "");
    // bind the global so a bare reference keeps its window receiver
    this.fetchFn = fetchFn ?? ((url, init) => fetch(url, init));
  }

  private async get<T>(path: string): Promise<T> {
    const url = this.base + path;
    const resp = await this.fetchFn(url);
    if (!resp.ok) throw new ApiError(resp.status, url);
    return (await resp.json()) as T;
  }

  getFunnel(): Promise<FunnelJson> {
    return this.get<FunnelJson>("/v1/mgmt/funnel");
  }

  async getSessions(): Promise<SessionSummaryJson[]> {
    const body = await this.get<{ sessions: SessionSummaryJson[] }>("/v1/sessions");
    return body.sessions;
  }

  getHealth(): Promise<MgmtHealthJson> {
    return this.get<MgmtHealthJson>("/v1/mgmt/health");
  }

  /** Rejections (bad code, already rewarded) come back as 200 bodies. */
  async verify(sessionId: string, code: string): Promise<VerifyResponseJson> {
    const url = `${this.base}/v1/mgmt/sessions/${encodeURIComponent(sessionId)}/verify`;
    const resp = await this.fetchFn(url, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ code }),
    });
    if (!resp.ok && resp.status !== 404) throw new ApiError(resp.status, url);
    return (await resp.json()) as VerifyResponseJson;
  }
}
