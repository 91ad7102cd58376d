/** Wires the API to state transitions; one poll and one action at a time.
 *
 * Kept DOM-free so the single-flight rules (no overlapping polls, no
 * double-fired verifications) are provable from node tests.
 */

import type { ApiClient } from "./api.js";
import type { DashboardState } from "./state.js";
import {
  applyPollFailure,
  applyPollSuccess,
  applyVerifyError,
  applyVerifyResult,
  beginVerify,
} from "./state.js";
import type { VerifyResponseJson } from "./types.js";

export interface Store {
  get(): DashboardState;
  set(next: DashboardState): void;
}

export class Controller {
  private pollInFlight = false;

  constructor(
    private readonly api: ApiClient,
    private readonly store: Store,
    private readonly now: () => number = () => Date.now(),
  ) {}

  /** One poll cycle; overlapping calls collapse into the running one. */
  async poll(): Promise<void> {
    if (this.pollInFlight) return;
    this.pollInFlight = true;
    try {
      const [funnel, sessions, health] = await Promise.all([
        this.api.getFunnel(),
        this.api.getSessions(),
        this.api.getHealth(),
      ]);
      this.store.set(
        applyPollSuccess(this.store.get(), { funnel, sessions, health, now: this.now() }),
      );
    } catch {
      this.store.set(applyPollFailure(this.store.get()));
    } finally {
      this.pollInFlight = false;
    }
  }

  /** Submit a completion code; repeat clicks while busy are dropped. */
  async verify(sessionId: string, code: string): Promise<VerifyResponseJson | null> {
    if (this.store.get().verifying !== null) return null;
    this.store.set(beginVerify(this.store.get(), sessionId));
    try {
      const result = await this.api.verify(sessionId, code);
      this.store.set(applyVerifyResult(this.store.get(), sessionId, result));
      return result;
    } catch (err) {
      const message = err instanceof Error ? err.message : String(err);
      this.store.set(applyVerifyError(this.store.get(), message));
      return null;
    }
  }
}
