/**
 * Annotation session state machine.
 *
 * A session walks a seeded shuffle of the manifest, records one label per
 * image (relabeling replaces, never duplicates), supports undo, and
 * exports the annotation JSON consumed by the `fishforge agreement`
 * command. All state is a plain serializable object so persistence is a
 * JSON round-trip.
 */

import { ManifestEntry, parseManifest } from "./manifest.js";
import { seededShuffle } from "./shuffle.js";

export const CLASS_LABELS = ["normal", "gain", "amplified"] as const;
export type Label = 0 | 1 | 2;

export interface SessionState {
  annotatorId: string;
  shuffleSeed: number;
  /** Presentation order (shuffled manifest entries). */
  order: ManifestEntry[];
  /** Index of the image currently shown. */
  cursor: number;
  /** image id -> chosen label; at most one entry per image. */
  labels: Record<string, Label>;
  /** image id -> ISO 8601 time of the (latest) label. */
  timestamps: Record<string, string>;
}

export interface AnnotationRecord {
  image_id: string;
  label: Label;
  timestamp_iso8601: string;
}

export interface AnnotationExport {
  annotator_id: string;
  annotations: AnnotationRecord[];
}

export class ExportBlockedError extends Error {
  constructor(public readonly missingCount: number) {
    super(
      `${missingCount} image(s) still unlabeled; ` +
        `pass partial=true to export anyway`,
    );
    this.name = "ExportBlockedError";
  }
}

export function createSession(
  manifestText: string,
  annotatorId: string,
  shuffleSeed: number,
): SessionState {
  const entries = parseManifest(manifestText);
  return {
    annotatorId,
    shuffleSeed,
    order: seededShuffle(entries, shuffleSeed),
    cursor: 0,
    labels: {},
    timestamps: {},
  };
}

export function currentEntry(state: SessionState): ManifestEntry | null {
  return state.cursor < state.order.length ? state.order[state.cursor] : null;
}

export function labeledCount(state: SessionState): number {
  return Object.keys(state.labels).length;
}

export function isComplete(state: SessionState): boolean {
  return labeledCount(state) === state.order.length;
}

/**
 * Record a label for the current image and advance.
 *
 * Relabeling (after an undo) replaces the previous choice, so exactly one
 * annotation per image survives.
 */
export function recordLabel(
  state: SessionState,
  label: Label,
  now: () => Date = () => new Date(),
): SessionState {
  const entry = currentEntry(state);
  if (entry === null) return state;
  return {
    ...state,
    labels: { ...state.labels, [entry.id]: label },
    timestamps: { ...state.timestamps, [entry.id]: now().toISOString() },
    cursor: state.cursor + 1,
  };
}

/** Step back to the previous image; its label stays until relabeled. */
export function undo(state: SessionState): SessionState {
  if (state.cursor === 0) return state;
  return { ...state, cursor: state.cursor - 1 };
}

/** Key handler contract: "1"/"2"/"3" label-and-advance, others ignored. */
export function labelForKey(key: string): Label | null {
  const index = ["1", "2", "3"].indexOf(key);
  return index === -1 ? null : (index as Label);
}

/**
 * Build the annotation JSON.
 *
 * Annotations are emitted in presentation order. An incomplete session is
 * blocked unless `partial` is set; partial exports carry a `partial: true`
 * marker but stay schema-compatible.
 */
export function exportAnnotations(
  state: SessionState,
  opts: { partial?: boolean } = {},
): AnnotationExport & { partial?: true } {
  const missing = state.order.length - labeledCount(state);
  if (missing > 0 && !opts.partial) {
    throw new ExportBlockedError(missing);
  }
  const annotations: AnnotationRecord[] = [];
  for (const entry of state.order) {
    if (entry.id in state.labels) {
      annotations.push({
        image_id: entry.id,
        label: state.labels[entry.id],
        timestamp_iso8601: state.timestamps[entry.id],
      });
    }
  }
  const doc: AnnotationExport & { partial?: true } = {
    annotator_id: state.annotatorId,
    annotations,
  };
  if (missing > 0) doc.partial = true;
  return doc;
}
