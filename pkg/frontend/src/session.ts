import {
  ApiClient,
  type HistoryStep,
  type RestoreMode,
  type RestoreResult,
  type SessionPriors,
} from "./api.js";

export const MAX_UPLOAD_BYTES = 16 * 1024 * 1024;

const ACCEPTED_TYPES = ["image/png", "image/jpeg"];

export type UiState = "idle" | "uploading" | "restoring";

export interface StepCard {
  mode: RestoreMode;
  instruction: string | null;
  beforeUrl: string;
  afterUrl: string;
  priorsUsed: SessionPriors;
  timestamp: string;
}

/**
 * One restoration session: upload, then chained auto or instruction-guided
 * steps. Holds no DOM; the card list is rebuilt from the server history after
 * every mutation so the UI always mirrors GET /history. At most one request
 * is in flight per session, enforced by the {idle, uploading, restoring}
 * state machine.
 */
export class GuidedSession {
  state: UiState = "idle";
  sessionId: string | null = null;
  originalUrl: string | null = null;
  priors: SessionPriors | null = null;
  steps: StepCard[] = [];

  constructor(private readonly client: ApiClient) {}

  get pending(): boolean {
    return this.state !== "idle";
  }

  async uploadAndStart(file: Blob, filename = "upload.png"): Promise<void> {
    if (this.pending) {
      throw new Error("an upload or restore is already in flight");
    }
    if (file.size > MAX_UPLOAD_BYTES) {
      const megabytes = (file.size / (1024 * 1024)).toFixed(1);
      throw new Error(`file is ${megabytes} MB, the limit is 16 MB`);
    }
    if (file.type && !ACCEPTED_TYPES.includes(file.type)) {
      throw new Error("only PNG and JPEG uploads are accepted");
    }
    this.state = "uploading";
    try {
      const created = await this.client.createSession(file, filename);
      this.sessionId = created.session_id;
      this.originalUrl = this.client.imageUrl(created.image_id);
      this.priors = created.priors;
      this.steps = [];
    } finally {
      this.state = "idle";
    }
  }

  /** Pass null for auto mode, text for a guided step. */
  async submitInstruction(instruction: string | null): Promise<RestoreResult> {
    if (!this.sessionId) {
      throw new Error("upload an image first");
    }
    if (this.pending) {
      throw new Error("a restore is already in flight");
    }
    const mode: RestoreMode = instruction === null ? "auto" : "guided";
    if (instruction !== null && !instruction.trim()) {
      throw new Error("guided mode needs an instruction");
    }
    this.state = "restoring";
    try {
      const result =
        instruction === null
          ? await this.client.restore(this.sessionId, mode)
          : await this.client.restore(this.sessionId, mode, instruction);
      await this.reconcile();
      return result;
    } finally {
      this.state = "idle";
    }
  }

  /** Re-pull the server history and rebuild the card list from it. */
  async refresh(): Promise<void> {
    if (!this.sessionId) {
      throw new Error("upload an image first");
    }
    await this.reconcile();
  }

  private async reconcile(): Promise<void> {
    const history = await this.client.history(this.sessionId as string);
    this.steps = history.map((step) => this.toCard(step));
  }

  private toCard(step: HistoryStep): StepCard {
    const priors = this.priors as SessionPriors;
    return {
      mode: step.mode,
      instruction: step.instruction,
      beforeUrl: this.client.imageUrl(step.input_image_id),
      afterUrl: this.client.imageUrl(step.output_image_id),
      // the server substitutes the instruction for the degradation prior in
      // guided mode and keeps the bundle's text otherwise
      priorsUsed: {
        degradation_text: step.mode === "guided" ? (step.instruction ?? "") : priors.degradation_text,
        content_text: priors.content_text,
      },
      timestamp: step.timestamp,
    };
  }
}
