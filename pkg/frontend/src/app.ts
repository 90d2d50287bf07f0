/**
 * Single-page demo client: upload with consent, watch progress, browse the
 * patch gallery, and display a patch full-screen at pixel-exact integer
 * scaling for holding a phone up to a camera.
 */

import { ApiClient, ConsentRequiredError, PatchEntry } from "./api.js";
import { DEFAULT_FORM, FormState, validateForm } from "./config.js";
import { pollJob, PollHandle } from "./poller.js";
import { integerScaleFactor, scaleNearest } from "./scaling.js";

const client = new ApiClient("");

type ViewName = "upload" | "progress" | "gallery" | "display" | "expired";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function showView(name: ViewName): void {
  for (const view of document.querySelectorAll<HTMLElement>("[data-view]")) {
    view.hidden = view.dataset.view !== name;
  }
  document.body.classList.toggle("display-mode", name === "display");
}

// ---------------------------------------------------------------------------
// Upload view
// ---------------------------------------------------------------------------

function readForm(): FormState {
  return {
    variant: (el<HTMLSelectElement>("field-variant").value as FormState["variant"]) ?? "dipa",
    lambdaTv: el<HTMLInputElement>("field-lambda-tv").value,
    steps: el<HTMLInputElement>("field-steps").value,
    patchSide: el<HTMLInputElement>("field-patch-side").value,
    count: el<HTMLInputElement>("field-count").value,
    seed: el<HTMLInputElement>("field-seed").value,
  };
}

function renderFieldErrors(errors: Record<string, string>): void {
  for (const span of document.querySelectorAll<HTMLElement>(".field-error")) {
    const key = span.dataset.for ?? "";
    span.textContent = errors[key] ?? "";
  }
}

/** Submit stays disabled until both a photo and explicit consent exist. */
export function submitAllowed(hasPhoto: boolean, consentChecked: boolean): boolean {
  return hasPhoto && consentChecked;
}

let currentJobId: string | null = null;
let poll: PollHandle | null = null;

function setupUpload(): void {
  const photoInput = el<HTMLInputElement>("field-photo");
  const consentBox = el<HTMLInputElement>("field-consent");
  const submitBtn = el<HTMLButtonElement>("submit-job");
  const uploadError = el<HTMLElement>("upload-error");

  const refreshGate = () => {
    submitBtn.disabled = !submitAllowed(
      (photoInput.files?.length ?? 0) > 0,
      consentBox.checked,
    );
  };
  photoInput.addEventListener("change", refreshGate);
  consentBox.addEventListener("change", refreshGate);
  refreshGate();

  const variantSelect = el<HTMLSelectElement>("field-variant");
  variantSelect.addEventListener("change", () => {
    if (variantSelect.value === "dipa") el<HTMLInputElement>("field-lambda-tv").value = "0";
  });

  submitBtn.addEventListener("click", async () => {
    uploadError.textContent = "";
    const result = validateForm(readForm());
    if (!result.ok) {
      renderFieldErrors(result.errors as Record<string, string>);
      return;
    }
    renderFieldErrors({});
    const photo = photoInput.files?.[0];
    if (!photo) return;
    submitBtn.disabled = true;
    try {
      currentJobId = await client.submitJob(photo, result.config, consentBox.checked);
    } catch (err) {
      uploadError.textContent =
        err instanceof ConsentRequiredError || err instanceof Error
          ? err.message
          : "upload failed; check the connection and retry";
      submitBtn.disabled = false;
      return;
    }
    el<HTMLElement>("job-id").textContent = currentJobId;
    showView("progress");
    startPolling(currentJobId);
  });
}

// ---------------------------------------------------------------------------
// Progress view
// ---------------------------------------------------------------------------

function startPolling(jobId: string): void {
  poll?.stop();
  const bar = el<HTMLProgressElement>("progress-bar");
  const label = el<HTMLElement>("progress-label");
  const failure = el<HTMLElement>("failure-reason");
  failure.textContent = "";
  bar.value = 0;

  poll = pollJob(client, jobId, {
    onUpdate(status) {
      bar.value = status.progress;
      label.textContent = `${status.status} · ${(status.progress * 100).toFixed(0)}%`;
    },
    onDone() {
      void openGallery(jobId);
    },
    onFailed(reason) {
      failure.textContent = reason; // surfaced verbatim
    },
    onExpired() {
      showView("expired");
    },
  });
}

// ---------------------------------------------------------------------------
// Gallery view
// ---------------------------------------------------------------------------

async function openGallery(jobId: string): Promise<void> {
  const grid = el<HTMLElement>("gallery-grid");
  grid.textContent = "";
  const patches = await client.getPatches(jobId);
  for (const patch of patches) {
    const card = document.createElement("figure");
    card.className = "patch-card";
    const img = document.createElement("img");
    img.src = patch.url;
    img.alt = `patch ${patch.index}`;
    img.width = 160;
    img.style.imageRendering = "pixelated";
    const caption = document.createElement("figcaption");
    caption.textContent =
      `#${patch.index} · loss ${patch.metadata.final_loss.toFixed(4)} · seed ${patch.metadata.seed}`;
    const button = document.createElement("button");
    button.textContent = "Display full screen";
    button.addEventListener("click", () => void openDisplay(jobId, patch));
    card.append(img, caption, button);
    grid.append(card);
  }
  showView("gallery");
}

// ---------------------------------------------------------------------------
// Fullscreen display
// ---------------------------------------------------------------------------

let wakeLock: { release(): Promise<void> } | null = null;
let hintTimer: number | undefined;

async function openDisplay(jobId: string, patch: PatchEntry): Promise<void> {
  const canvas = el<HTMLCanvasElement>("display-canvas");
  const hint = el<HTMLElement>("display-hint");

  const bytes = await client.fetchPatchBytes(jobId, patch.index);
  const bitmap = await createImageBitmap(new Blob([bytes], { type: "image/png" }));

  // read native pixels once, replicate at the integer factor, paint exactly
  const native = document.createElement("canvas");
  native.width = bitmap.width;
  native.height = bitmap.height;
  const nctx = native.getContext("2d", { willReadFrequently: true })!;
  nctx.drawImage(bitmap, 0, 0);
  const src = nctx.getImageData(0, 0, bitmap.width, bitmap.height);
  const factor = integerScaleFactor(
    bitmap.width,
    window.screen.width * window.devicePixelRatio,
    window.screen.height * window.devicePixelRatio,
  );
  const scaled = scaleNearest(
    { width: src.width, height: src.height, data: src.data },
    factor,
  );
  canvas.width = scaled.width;
  canvas.height = scaled.height;
  canvas.getContext("2d")!.putImageData(
    new ImageData(scaled.data, scaled.width, scaled.height), 0, 0);

  showView("display");
  if (document.documentElement.requestFullscreen) {
    try {
      await document.documentElement.requestFullscreen();
    } catch {
      // fullscreen denied: the view still covers the page
    }
  }
  try {
    wakeLock = (await (navigator as any).wakeLock?.request("screen")) ?? null;
  } catch {
    wakeLock = null;
  }

  hint.hidden = false;
  window.clearTimeout(hintTimer);
  hintTimer = window.setTimeout(() => {
    hint.hidden = true;
  }, 4000);
}

function setupDisplay(): void {
  const view = el<HTMLElement>("view-display");
  const hint = el<HTMLElement>("display-hint");
  view.addEventListener("click", (event) => {
    if ((event.target as HTMLElement).id === "display-exit") return;
    hint.hidden = !hint.hidden; // tap toggles the hint overlay
  });
  el<HTMLButtonElement>("display-exit").addEventListener("click", async () => {
    if (document.fullscreenElement) await document.exitFullscreen();
    await wakeLock?.release();
    wakeLock = null;
    showView("gallery");
  });
}

// ---------------------------------------------------------------------------

function init(): void {
  const form = DEFAULT_FORM;
  el<HTMLInputElement>("field-lambda-tv").value = form.lambdaTv;
  el<HTMLInputElement>("field-steps").value = form.steps;
  el<HTMLInputElement>("field-patch-side").value = form.patchSide;
  el<HTMLInputElement>("field-count").value = form.count;
  el<HTMLInputElement>("field-seed").value = form.seed;
  setupUpload();
  setupDisplay();
  showView("upload");
}

if (typeof document !== "undefined") {
  document.addEventListener("DOMContentLoaded", init);
}
