/**
 * Manifest parsing for the annotation tool.
 *
 * The dataset manifest is JSON Lines: one object per patch with at least
 * `id` and `file`. Ground-truth fields (`class_id`, `n_green`, `n_red`,
 * `centers`) are deliberately dropped at parse time so nothing downstream
 * of this module can leak them into the annotation view.
 */

export interface ManifestEntry {
  /** Stable image identifier, e.g. "gain_000017". */
  id: string;
  /** Image path relative to the manifest's directory. */
  file: string;
}

export class ManifestError extends Error {
  constructor(
    message: string,
    public readonly line?: number,
  ) {
    super(line === undefined ? message : `line ${line}: ${message}`);
    this.name = "ManifestError";
  }
}

/**
 * Parse manifest JSONL text into blind entries.
 *
 * Any malformed line aborts the whole parse (no partial sessions), with
 * the 1-based line number in the error.
 */
export function parseManifest(text: string): ManifestEntry[] {
  const entries: ManifestEntry[] = [];
  const seen = new Set<string>();
  const lines = text.split("\n");
  for (let i = 0; i < lines.length; i++) {
    const line = lines[i].trim();
    if (line === "") continue;
    let obj: unknown;
    try {
      obj = JSON.parse(line);
    } catch (err) {
      throw new ManifestError(`invalid JSON (${(err as Error).message})`, i + 1);
    }
    if (typeof obj !== "object" || obj === null) {
      throw new ManifestError("entry is not an object", i + 1);
    }
    const { id, file } = obj as Record<string, unknown>;
    if (typeof id !== "string" || id === "") {
      throw new ManifestError("missing string field 'id'", i + 1);
    }
    if (typeof file !== "string" || file === "") {
      throw new ManifestError("missing string field 'file'", i + 1);
    }
    if (seen.has(id)) {
      throw new ManifestError(`duplicate id '${id}'`, i + 1);
    }
    seen.add(id);
    entries.push({ id, file });
  }
  if (entries.length === 0) {
    throw new ManifestError("manifest contains no entries");
  }
  return entries;
}

/**
 * Pre-flight report: ids whose image file is not resolvable.
 *
 * `exists` is injected so browser (fetch HEAD) and test (fs) callers share
 * the logic.
 */
export async function missingImages(
  entries: ManifestEntry[],
  exists: (file: string) => Promise<boolean>,
): Promise<string[]> {
  const missing: string[] = [];
  for (const entry of entries) {
    if (!(await exists(entry.file))) missing.push(entry.id);
  }
  return missing;
}
