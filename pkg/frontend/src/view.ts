/**
 * DOM rendering for the annotation view.
 *
 * Blind by construction: the view receives only an opaque image URL (a
 * blob/data URL created by the loader, never the manifest file path — file
 * names embed the true class in generated datasets), the progress
 * counters, and the class button captions. Image identifiers and every
 * other manifest field stay out of the DOM.
 */

import { CLASS_LABELS, SessionState, currentEntry, labeledCount } from "./session.js";

/** Button captions shown to the annotator (display form, not manifest strings). */
export const CLASS_CAPTIONS = CLASS_LABELS.map(
  (name) => name.charAt(0).toUpperCase() + name.slice(1),
);

export function renderAnnotationView(
  state: SessionState,
  imageUrl: string | null,
  root: HTMLElement,
  onLabel: (label: 0 | 1 | 2) => void,
): void {
  root.textContent = "";
  const doc = root.ownerDocument;

  const progress = doc.createElement("p");
  progress.className = "progress";
  progress.textContent = `${labeledCount(state)}/${state.order.length}`;
  root.appendChild(progress);

  if (currentEntry(state) === null) {
    const done = doc.createElement("p");
    done.className = "done";
    done.textContent = "All images labeled — ready to export.";
    root.appendChild(done);
    return;
  }

  const img = doc.createElement("img");
  img.src = imageUrl ?? "";
  img.alt = "cell patch to annotate";
  img.width = 256;
  img.height = 256;
  root.appendChild(img);

  const buttons = doc.createElement("div");
  buttons.className = "choices";
  CLASS_CAPTIONS.forEach((caption, index) => {
    const button = doc.createElement("button");
    button.textContent = `${index + 1}: ${caption}`;
    button.dataset.label = String(index);
    button.addEventListener("click", () => onLabel(index as 0 | 1 | 2));
    buttons.appendChild(button);
  });
  root.appendChild(buttons);
}

export function renderErrorBanner(message: string, root: HTMLElement): void {
  const banner = root.ownerDocument.createElement("div");
  banner.className = "error-banner";
  banner.setAttribute("role", "alert");
  banner.textContent = message;
  root.prepend(banner);
}
