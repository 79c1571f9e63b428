/**
 * Browser entry point: wires the session state machine to the DOM.
 *
 * The app is fully static. Host it in (or pick) the dataset directory so
 * `manifest.jsonl` and the PNGs resolve as siblings; images are fetched as
 * blobs and shown through object URLs so file names never reach the DOM.
 */

import { ManifestError, missingImages } from "./manifest.js";
import {
  ExportBlockedError,
  SessionState,
  createSession,
  currentEntry,
  exportAnnotations,
  isComplete,
  labelForKey,
  recordLabel,
  undo,
} from "./session.js";
import { loadSession, saveSession } from "./storage.js";
import { renderAnnotationView, renderErrorBanner } from "./view.js";

const imageUrlCache = new Map<string, string>();

async function imageUrlFor(file: string): Promise<string | null> {
  const cached = imageUrlCache.get(file);
  if (cached !== undefined) return cached;
  const response = await fetch(file);
  if (!response.ok) return null;
  const url = URL.createObjectURL(await response.blob());
  imageUrlCache.set(file, url);
  return url;
}

function download(filename: string, text: string): void {
  const a = document.createElement("a");
  a.href = URL.createObjectURL(new Blob([text], { type: "application/json" }));
  a.download = filename;
  a.click();
  URL.revokeObjectURL(a.href);
}

export async function start(root: HTMLElement): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const annotatorId = params.get("annotator") ?? "anonymous";
  const shuffleSeed = Number(params.get("seed") ?? "0");

  let manifestText: string;
  try {
    const response = await fetch("manifest.jsonl");
    if (!response.ok) throw new Error(`HTTP ${response.status}`);
    manifestText = await response.text();
  } catch (err) {
    renderErrorBanner(`cannot load manifest.jsonl: ${(err as Error).message}`, root);
    return;
  }

  let state: SessionState;
  try {
    state =
      loadSession(window.localStorage, annotatorId, shuffleSeed) ??
      createSession(manifestText, annotatorId, shuffleSeed);
  } catch (err) {
    if (err instanceof ManifestError) {
      renderErrorBanner(err.message, root);
      return;
    }
    throw err;
  }

  const missing = await missingImages(state.order, async (file) => {
    const response = await fetch(file, { method: "HEAD" });
    return response.ok;
  });
  if (missing.length > 0) {
    renderErrorBanner(
      `${missing.length} image file(s) missing; first: ${missing[0]}`,
      root,
    );
  }

  const update = async (next: SessionState) => {
    state = next;
    saveSession(window.localStorage, state);
    const entry = currentEntry(state);
    const url = entry === null ? null : await imageUrlFor(entry.file);
    renderAnnotationView(state, url, root, (label) => void update(recordLabel(state, label)));
  };

  window.addEventListener("keydown", (event) => {
    const label = labelForKey(event.key);
    if (label !== null) void update(recordLabel(state, label));
    else if (event.key === "u" || event.key === "Backspace") void update(undo(state));
    else if (event.key === "e") {
      try {
        const doc = exportAnnotations(state, { partial: !isComplete(state) && event.shiftKey });
        download(`annotations_${annotatorId}.json`, JSON.stringify(doc, null, 2));
      } catch (err) {
        if (err instanceof ExportBlockedError) renderErrorBanner(err.message, root);
        else throw err;
      }
    }
  });

  await update(state);
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  void start(document.getElementById("app") as HTMLElement);
}
