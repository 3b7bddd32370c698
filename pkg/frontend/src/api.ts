// Typed client for the study service wire interface. The fetch function is
// injectable so tests can record the full network log.

export interface Progress {
  done: number;
  total: number;
}

export interface NextItem {
  token: string;
  progress: Progress;
  image: string; // base64 PNG
}

export type NextResponse = NextItem | { done: true };

export interface SubmitResponse {
  accepted: boolean;
  progress: Progress;
}

export class ApiError extends Error {
  constructor(message: string, readonly status: number, readonly retriable: boolean) {
    super(message);
  }
}

export class StudyApi {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchFn: typeof fetch = (...args) => fetch(...args),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let resp: Response;
    try {
      resp = await this.fetchFn(`${this.baseUrl}${path}`, init);
    } catch (err) {
      throw new ApiError(`service unreachable: ${String(err)}`, 0, true);
    }
    const body = await resp.text();
    if (!resp.ok) {
      let detail = body;
      try {
        detail = (JSON.parse(body) as { error?: string }).error ?? body;
      } catch {
        // non-JSON error body; keep raw text
      }
      throw new ApiError(detail, resp.status, resp.status >= 500);
    }
    return JSON.parse(body) as T;
  }

  createSession(raterId: string, seed: number): Promise<{ session_id: string; progress: Progress }> {
    return this.request("/sessions", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ rater_id: raterId, seed }),
    });
  }

  nextItem(sessionId: string): Promise<NextResponse> {
    return this.request(`/sessions/${encodeURIComponent(sessionId)}/next`);
  }

  submitScore(sessionId: string, token: string, score: number): Promise<SubmitResponse> {
    return this.request(`/sessions/${encodeURIComponent(sessionId)}/scores`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ token, score }),
    });
  }
}
