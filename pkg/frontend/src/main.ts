import { ApiClient, ApiError } from "./api.js";
import { GuidedSession, type StepCard } from "./session.js";
import { mountCompareSlider } from "./slider.js";

const client = new ApiClient("");
const session = new GuidedSession(client);

function el<T extends HTMLElement>(id: string): T {
  return document.getElementById(id) as T;
}

function describeError(err: unknown): string {
  if (err instanceof ApiError) {
    return err.status === 0 ? `server unreachable (${err.message})` : err.message;
  }
  return err instanceof Error ? err.message : String(err);
}

function showBanner(message: string, retry?: () => void) {
  const banner = el<HTMLDivElement>("banner");
  el<HTMLSpanElement>("banner-text").textContent = message;
  const retryBtn = el<HTMLButtonElement>("banner-retry");
  retryBtn.hidden = !retry;
  retryBtn.onclick = () => {
    banner.hidden = true;
    retry?.();
  };
  banner.hidden = false;
}

function syncControls() {
  el<HTMLInputElement>("file-input").disabled = session.pending;
  el<HTMLButtonElement>("apply-btn").disabled = session.pending;
  el<HTMLButtonElement>("auto-btn").disabled = session.pending;
  document.body.classList.toggle("busy", session.pending);
}

function renderCard(card: StepCard, index: number): HTMLLIElement {
  const item = document.createElement("li");
  item.className = "step-card";
  const title = document.createElement("h3");
  title.textContent =
    card.mode === "auto" ? `step ${index + 1}: auto` : `step ${index + 1}: "${card.instruction}"`;
  const priors = document.createElement("p");
  priors.className = "priors";
  priors.textContent = `prior used: ${card.priorsUsed.degradation_text}`;
  const view = document.createElement("div");
  mountCompareSlider(view, card.beforeUrl, card.afterUrl);
  item.append(title, priors, view);
  return item;
}

function renderSession() {
  el<HTMLElement>("session-panel").hidden = session.sessionId === null;
  if (session.sessionId === null) return;
  el<HTMLElement>("diag-degradation").textContent = session.priors?.degradation_text ?? "";
  el<HTMLElement>("diag-content").textContent = session.priors?.content_text ?? "";
  const original = el<HTMLImageElement>("original-img");
  if (session.originalUrl && original.getAttribute("src") !== session.originalUrl) {
    original.src = session.originalUrl;
  }
  const list = el<HTMLOListElement>("steps");
  list.replaceChildren(...session.steps.map(renderCard));
}

async function onUpload(file: File) {
  try {
    const done = session.uploadAndStart(file, file.name);
    syncControls();
    await done;
  } catch (err) {
    showBanner(describeError(err), () => void onUpload(file));
    return;
  } finally {
    syncControls();
  }
  renderSession();
}

async function onSubmit(instruction: string | null) {
  if (session.pending) return;
  try {
    const done = session.submitInstruction(instruction);
    syncControls();
    await done;
  } catch (err) {
    showBanner(describeError(err));
    return;
  } finally {
    syncControls();
  }
  if (instruction !== null) {
    el<HTMLInputElement>("instruction-input").value = "";
  }
  renderSession();
}

document.addEventListener("DOMContentLoaded", () => {
  el<HTMLButtonElement>("banner-dismiss").addEventListener("click", () => {
    el<HTMLDivElement>("banner").hidden = true;
  });

  el<HTMLInputElement>("file-input").addEventListener("change", (event) => {
    const input = event.target as HTMLInputElement;
    const file = input.files?.[0];
    if (file) {
      void onUpload(file);
    }
    input.value = "";
  });

  el<HTMLFormElement>("instruction-form").addEventListener("submit", (event) => {
    event.preventDefault();
    const text = el<HTMLInputElement>("instruction-input").value;
    if (!text.trim()) {
      showBanner("type an instruction first, or use auto restore");
      return;
    }
    void onSubmit(text);
  });

  el<HTMLButtonElement>("auto-btn").addEventListener("click", () => {
    void onSubmit(null);
  });
});
