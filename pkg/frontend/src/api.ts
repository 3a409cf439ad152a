export interface SessionPriors {
  degradation_text: string;
  content_text: string;
}

export interface SessionCreated {
  session_id: string;
  image_id: string;
  priors: SessionPriors;
}

export type RestoreMode = "auto" | "guided";

export interface RestoreResult {
  output_image_id: string;
  psnr: number | null;
  priors_used: SessionPriors;
}

export interface HistoryStep {
  input_image_id: string;
  instruction: string | null;
  mode: RestoreMode;
  output_image_id: string;
  timestamp: string;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

async function toApiError(response: Response): Promise<ApiError> {
  let code = "http_error";
  let message = `${response.status} ${response.statusText}`;
  try {
    const body = (await response.json()) as { error?: { code?: string; message?: string } };
    if (body.error?.code) {
      code = body.error.code;
      message = body.error.message ?? message;
    }
  } catch {
    // non-JSON error body, keep the status line
  }
  return new ApiError(response.status, code, message);
}

/**
 * Typed client for the restoration service HTTP API.
 */
export class ApiClient {
  private readonly baseUrl: string;
  private readonly fetchFn: typeof fetch;

  constructor(baseUrl = "", fetchFn: typeof fetch = globalThis.fetch.bind(globalThis)) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
    this.fetchFn = fetchFn;
  }

  private async request(path: string, init?: RequestInit): Promise<Response> {
    let response: Response;
    try {
      response = await this.fetchFn(this.baseUrl + path, init);
    } catch (err) {
      throw new ApiError(0, "unreachable", `server unreachable: ${String(err)}`);
    }
    if (!response.ok) {
      throw await toApiError(response);
    }
    return response;
  }

  async createSession(file: Blob, filename = "upload.png"): Promise<SessionCreated> {
    const form = new FormData();
    form.append("file", file, filename);
    const response = await this.request("/api/sessions", { method: "POST", body: form });
    return (await response.json()) as SessionCreated;
  }

  async restore(
    sessionId: string,
    mode: RestoreMode,
    instruction?: string,
  ): Promise<RestoreResult> {
    const body: Record<string, unknown> = { mode };
    if (instruction !== undefined) {
      body.instruction = instruction;
    }
    const response = await this.request(`/api/sessions/${sessionId}/restore`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    return (await response.json()) as RestoreResult;
  }

  async history(sessionId: string): Promise<HistoryStep[]> {
    const response = await this.request(`/api/sessions/${sessionId}/history`);
    return (await response.json()) as HistoryStep[];
  }

  // Images are referenced by URL and rendered by the browser as served;
  // the client never touches the pixel data.
  imageUrl(imageId: string): string {
    return `${this.baseUrl}/api/images/${imageId}`;
  }

  async health(): Promise<boolean> {
    try {
      await this.request("/healthz");
      return true;
    } catch {
      return false;
    }
  }
}
