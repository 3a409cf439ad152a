import { afterEach, beforeEach, describe, expect, it } from "vitest";

import { ApiClient, ApiError, type HistoryStep } from "../src/api.js";
import { GuidedSession, MAX_UPLOAD_BYTES, type StepCard } from "../src/session.js";
import { MOCK_PRIORS, RestorationServiceMock } from "./mock_server.js";

const PNG_SIGNATURE = [0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a];

function pngBlob(extra = 64): Blob {
  const payload = new Uint8Array(PNG_SIGNATURE.length + extra);
  payload.set(PNG_SIGNATURE);
  for (let i = 0; i < extra; i++) {
    payload[PNG_SIGNATURE.length + i] = i & 0xff;
  }
  return new Blob([payload], { type: "image/png" });
}

async function blobBytes(blob: Blob): Promise<Uint8Array> {
  return new Uint8Array(await blob.arrayBuffer());
}

/** Rebuild the card list from a raw history response, as the session does. */
function cardsFromHistory(client: ApiClient, history: HistoryStep[]): StepCard[] {
  return history.map((step) => ({
    mode: step.mode,
    instruction: step.instruction,
    beforeUrl: client.imageUrl(step.input_image_id),
    afterUrl: client.imageUrl(step.output_image_id),
    priorsUsed: {
      degradation_text:
        step.mode === "guided" ? (step.instruction ?? "") : MOCK_PRIORS.degradation_text,
      content_text: MOCK_PRIORS.content_text,
    },
    timestamp: step.timestamp,
  }));
}

describe("guided restoration session against a mock server", () => {
  let mock: RestorationServiceMock;
  let client: ApiClient;
  let session: GuidedSession;

  beforeEach(async () => {
    mock = new RestorationServiceMock();
    await mock.start();
    client = new ApiClient(mock.url);
    session = new GuidedSession(client);
  });

  afterEach(async () => {
    await mock.close();
  });

  it("upload populates the diagnosis and ships the file bytes verbatim", async () => {
    const blob = pngBlob();
    await session.uploadAndStart(blob, "noisy.png");

    expect(session.sessionId).toMatch(/^session/);
    expect(session.priors).toEqual(MOCK_PRIORS);
    expect(session.steps).toEqual([]);
    expect(session.state).toBe("idle");

    const served = await fetch(session.originalUrl as string);
    expect(new Uint8Array(await served.arrayBuffer())).toEqual(await blobBytes(blob));
  });

  it("auto then guided chains two cards that mirror the server history", async () => {
    await session.uploadAndStart(pngBlob());
    await session.submitInstruction(null);
    const result = await session.submitInstruction("remove the rain streaks");

    expect(session.steps).toHaveLength(2);
    const [first, second] = session.steps;
    expect(first.mode).toBe("auto");
    expect(first.instruction).toBeNull();
    expect(first.beforeUrl).toBe(session.originalUrl);
    expect(second.mode).toBe("guided");
    expect(second.instruction).toBe("remove the rain streaks");
    // each step starts from the previous step's output
    expect(second.beforeUrl).toBe(first.afterUrl);
    expect(second.afterUrl).toBe(client.imageUrl(result.output_image_id));

    expect(first.priorsUsed.degradation_text).toBe(MOCK_PRIORS.degradation_text);
    expect(second.priorsUsed.degradation_text).toBe("remove the rain streaks");

    const history = await client.history(session.sessionId as string);
    expect(session.steps).toEqual(cardsFromHistory(client, history));
  });

  it("refresh picks up steps issued outside the controller", async () => {
    await session.uploadAndStart(pngBlob());
    await session.submitInstruction(null);
    await client.restore(session.sessionId as string, "guided", "brighten the shadows");

    await session.refresh();
    expect(session.steps).toHaveLength(2);
    expect(session.steps[1].instruction).toBe("brighten the shadows");
    const history = await client.history(session.sessionId as string);
    expect(session.steps).toEqual(cardsFromHistory(client, history));
  });

  it("double submit issues exactly one request", async () => {
    await session.uploadAndStart(pngBlob());

    const first = session.submitInstruction(null);
    const second = session.submitInstruction(null);
    await expect(second).rejects.toThrow(/already in flight/);
    await first;

    expect(mock.restoreCalls).toBe(1);
    expect(session.steps).toHaveLength(1);
    expect(session.state).toBe("idle");
  });

  it("rejects an oversized file before any request is sent", async () => {
    const oversized = new Blob([new Uint8Array(MAX_UPLOAD_BYTES + 1)], { type: "image/png" });
    await expect(session.uploadAndStart(oversized)).rejects.toThrow(/16 MB/);
    expect(mock.requests).toHaveLength(0);
    expect(session.state).toBe("idle");
    expect(session.sessionId).toBeNull();
  });

  it("rejects a non-image type client-side", async () => {
    const text = new Blob([new Uint8Array(16)], { type: "text/plain" });
    await expect(session.uploadAndStart(text)).rejects.toThrow(/PNG and JPEG/);
    expect(mock.requests).toHaveLength(0);
  });

  it("blocks a blank guided instruction without a request", async () => {
    await session.uploadAndStart(pngBlob());
    await expect(session.submitInstruction("   ")).rejects.toThrow(/instruction/);
    expect(mock.restoreCalls).toBe(0);
    expect(session.state).toBe("idle");
  });

  it("surfaces the server's error envelope as a typed error", async () => {
    mock.failUploadsWith = {
      status: 503,
      code: "provider_unavailable",
      message: "prior providers are unreachable",
    };
    const attempt = session.uploadAndStart(pngBlob());
    await expect(attempt).rejects.toMatchObject({
      name: "ApiError",
      status: 503,
      code: "provider_unavailable",
    });
    expect(session.sessionId).toBeNull();
    expect(session.state).toBe("idle");
  });

  it("maps an unknown session to its error code", async () => {
    const attempt = client.history("missing");
    await expect(attempt).rejects.toMatchObject({ status: 404, code: "session_not_found" });
  });

  it("reports an unreachable server with status 0", async () => {
    const dead = new ApiClient(mock.url);
    await mock.close();
    const attempt = dead.history("whatever");
    await expect(attempt).rejects.toBeInstanceOf(ApiError);
    await expect(attempt).rejects.toMatchObject({ status: 0, code: "unreachable" });
    // recreate so afterEach can close a live server
    mock = new RestorationServiceMock();
    await mock.start();
  });
});
