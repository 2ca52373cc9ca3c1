// Thin client for the annotation service. Server rejections become ApiError
// (code and message kept verbatim for the banner); transport problems become
// NetworkError so the caller knows the draft must survive.

import type { HumanResponsePayload, NextTaskPayload, ProgressPayload } from "./types.js";

export class ApiError extends Error {
  readonly status: number;
  readonly code: string;

  constructor(status: number, code: string, message: string) {
    super(message);
    this.status = status;
    this.code = code;
  }
}

export class NetworkError extends Error {}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export interface Session {
  baseUrl: string;
  studyId: string;
  annotatorId: string;
  token: string;
}

async function rejection(resp: Response): Promise<ApiError> {
  let code = "error";
  let message = `HTTP ${resp.status}`;
  try {
    const body = await resp.json();
    if (typeof body?.code === "string") code = body.code;
    if (typeof body?.message === "string") message = body.message;
  } catch {
    // non-JSON error body; keep the status line
  }
  return new ApiError(resp.status, code, message);
}

export class ApiClient {
  private readonly session: Session;
  private readonly fetchImpl: FetchLike;

  constructor(session: Session, fetchImpl?: FetchLike) {
    this.session = session;
    this.fetchImpl = fetchImpl ?? ((url, init) => fetch(url, init));
  }

  private studyUrl(suffix: string): string {
    return `${this.session.baseUrl}/studies/${encodeURIComponent(this.session.studyId)}${suffix}`;
  }

  private async request(url: string, init?: RequestInit): Promise<Response> {
    let resp: Response;
    try {
      resp = await this.fetchImpl(url, init);
    } catch (err) {
      throw new NetworkError(err instanceof Error ? err.message : String(err));
    }
    if (!resp.ok) throw await rejection(resp);
    return resp;
  }

  async nextTask(): Promise<NextTaskPayload> {
    const url = this.studyUrl(`/next?annotator=${encodeURIComponent(this.session.annotatorId)}`);
    const resp = await this.request(url, {
      headers: { Authorization: `Bearer ${this.session.token}` },
    });
    return (await resp.json()) as NextTaskPayload;
  }

  async submitResponse(response: HumanResponsePayload): Promise<ProgressPayload> {
    const resp = await this.request(this.studyUrl("/responses"), {
      method: "POST",
      headers: {
        "Content-Type": "application/json",
        Authorization: `Bearer ${this.session.token}`,
      },
      body: JSON.stringify(response),
    });
    return (await resp.json()) as ProgressPayload;
  }

  async progress(): Promise<ProgressPayload> {
    const resp = await this.request(this.studyUrl("/progress"));
    return (await resp.json()) as ProgressPayload;
  }

  // Task payloads carry image routes relative to the study root.
  imageUrl(relative: string): string {
    return this.studyUrl(`/${relative}`);
  }
}
