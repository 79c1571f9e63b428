/**
 * Local persistence so an annotation session survives a page reload.
 * Last write wins; one slot per (annotator, seed) pair.
 */

import { SessionState } from "./session.js";

export interface KeyValueStore {
  getItem(key: string): string | null;
  setItem(key: string, value: string): void;
  removeItem(key: string): void;
}

const PREFIX = "fishforge-annotator/";

export function storageKey(annotatorId: string, shuffleSeed: number): string {
  return `${PREFIX}${annotatorId}/${shuffleSeed}`;
}

export function saveSession(store: KeyValueStore, state: SessionState): void {
  store.setItem(storageKey(state.annotatorId, state.shuffleSeed), JSON.stringify(state));
}

export function loadSession(
  store: KeyValueStore,
  annotatorId: string,
  shuffleSeed: number,
): SessionState | null {
  const raw = store.getItem(storageKey(annotatorId, shuffleSeed));
  if (raw === null) return null;
  try {
    return JSON.parse(raw) as SessionState;
  } catch {
    return null;
  }
}

export function clearSession(
  store: KeyValueStore,
  annotatorId: string,
  shuffleSeed: number,
): void {
  store.removeItem(storageKey(annotatorId, shuffleSeed));
}
