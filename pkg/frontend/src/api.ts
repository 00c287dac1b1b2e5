/** Thin typed client for the conversation-practice HTTP API. */

import { consumeEventStream, type StreamHandlers } from "./stream.js";
import type {
  DetectPayload,
  ProgressPayload,
  SessionCreatePayload,
  SessionInfo,
  SkillInfo,
  TurnPayload,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public detail: string,
  ) {
    super(`API error ${status}: ${detail}`);
  }
}

export class SessionBusyError extends ApiError {
  constructor(detail: string) {
    super(409, detail);
  }
}

type FetchLike = typeof fetch;

export class ApiClient {
  constructor(
    private baseUrl: string = "",
    private fetchFn: FetchLike = fetch,
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(`${this.baseUrl}${path}`, init);
    if (!response.ok) {
      const detail = await response.text();
      if (response.status === 409) {
        throw new SessionBusyError(detail);
      }
      throw new ApiError(response.status, detail);
    }
    return (await response.json()) as T;
  }

  createSession(payload: SessionCreatePayload): Promise<SessionInfo> {
    return this.request<SessionInfo>("/sessions", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  postTurn(sessionId: string, text: string): Promise<TurnPayload> {
    return this.request<TurnPayload>(`/sessions/${sessionId}/turns`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ text }),
    });
  }

  /** Streaming turn; tokens and the final payload arrive via handlers. */
  async streamTurn(
    sessionId: string,
    text: string,
    handlers: StreamHandlers,
  ): Promise<void> {
    const response = await this.fetchFn(
      `${this.baseUrl}/sessions/${sessionId}/turns?stream=true`,
      {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ text }),
      },
    );
    if (!response.ok) {
      const detail = await response.text();
      if (response.status === 409) {
        throw new SessionBusyError(detail);
      }
      throw new ApiError(response.status, detail);
    }
    if (!response.body) {
      throw new ApiError(502, "response body is not streamable");
    }
    await consumeEventStream(response.body, handlers);
  }

  getProgress(sessionId: string): Promise<ProgressPayload> {
    return this.request<ProgressPayload>(`/sessions/${sessionId}/progress`);
  }

  getSkills(params?: { category?: string; level?: string }): Promise<SkillInfo[]> {
    const query = new URLSearchParams();
    if (params?.category) {
      query.set("category", params.category);
    }
    if (params?.level) {
      query.set("level", params.level);
    }
    const suffix = query.toString() ? `?${query}` : "";
    return this.request<SkillInfo[]>(`/skills${suffix}`);
  }

  detect(text: string, skillIds: number[] = []): Promise<DetectPayload> {
    return this.request<DetectPayload>("/detect", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ text, skill_ids: skillIds }),
    });
  }
}
