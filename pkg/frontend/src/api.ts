// Thin typed client for the listening-test service.
//
// Submission carries a caller-provided idempotency token: network failures
// retry with the same token, so a request that actually landed is acked as
// a duplicate instead of persisting twice. HTTP-level rejections (4xx) are
// never retried; they mean the request itself is wrong.

import type { NextPanelResponse, SessionInfo, SubmitResult } from "./types.js";

export class ApiError extends Error {
  constructor(readonly status: number, detail: string) {
    super(detail);
    this.name = "ApiError";
  }
}

export function makeToken(): string {
  if (typeof crypto !== "undefined" && "randomUUID" in crypto) {
    return crypto.randomUUID();
  }
  return `${Date.now()}-${Math.random().toString(36).slice(2)}`;
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

async function parseOrThrow<T>(response: Response): Promise<T> {
  if (!response.ok) {
    let detail = response.statusText;
    try {
      const body = await response.json();
      if (typeof body.detail === "string") detail = body.detail;
    } catch {
      // non-JSON error body; keep the status text
    }
    throw new ApiError(response.status, detail);
  }
  return (await response.json()) as T;
}

export class ApiClient {
  constructor(
    private readonly baseUrl = "",
    private readonly fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  async createSession(testId: string, raterId?: string): Promise<SessionInfo> {
    const response = await this.fetchFn(`${this.baseUrl}/sessions`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ test_id: testId, rater_id: raterId ?? null }),
    });
    return parseOrThrow<SessionInfo>(response);
  }

  async nextPanel(sessionId: string): Promise<NextPanelResponse> {
    const response = await this.fetchFn(`${this.baseUrl}/sessions/${sessionId}/next`);
    return parseOrThrow<NextPanelResponse>(response);
  }

  /**
   * Post one panel's scores. Retries transport failures up to `attempts`
   * times with the same client token; the service deduplicates on it.
   */
  async submitRatings(
    sessionId: string,
    panelId: string,
    scores: Record<string, number>,
    clientToken: string,
    attempts = 3,
  ): Promise<SubmitResult> {
    const url = `${this.baseUrl}/sessions/${sessionId}/panels/${panelId}/ratings`;
    const init: RequestInit = {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ scores, client_token: clientToken }),
    };
    let lastFailure: unknown;
    for (let attempt = 0; attempt < attempts; attempt++) {
      let response: Response;
      try {
        response = await this.fetchFn(url, init);
      } catch (failure) {
        lastFailure = failure; // network-level; same token, try again
        continue;
      }
      return parseOrThrow<SubmitResult>(response);
    }
    throw lastFailure instanceof Error
      ? lastFailure
      : new Error("submission failed after retries");
  }

  audioUrl(path: string): string {
    return `${this.baseUrl}${path}`;
  }
}
