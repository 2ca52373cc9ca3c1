// Draft persistence. Every form change lands here, so a network failure or
// an accidental reload never loses an annotator's work; the draft is cleared
// only after the server acknowledges the submission.

import type { Draft } from "./types.js";
import { emptyDraft } from "./types.js";

// Subset of the DOM Storage interface; tests supply a plain-object fake.
export interface StorageLike {
  getItem(key: string): string | null;
  setItem(key: string, value: string): void;
  removeItem(key: string): void;
}

export class DraftStore {
  private readonly storage: StorageLike;
  private readonly prefix: string;

  constructor(storage: StorageLike, studyId: string, annotatorId: string) {
    this.storage = storage;
    this.prefix = `editlens-draft:${studyId}:${annotatorId}`;
  }

  private key(taskId: string): string {
    return `${this.prefix}:${taskId}`;
  }

  load(taskId: string): Draft | null {
    const raw = this.storage.getItem(this.key(taskId));
    if (raw === null) return null;
    try {
      const parsed = JSON.parse(raw);
      const base = emptyDraft();
      if (typeof parsed !== "object" || parsed === null) return null;
      return {
        q1: typeof parsed.q1 === "number" ? parsed.q1 : base.q1,
        q3: typeof parsed.q3 === "number" ? parsed.q3 : base.q3,
        q4: typeof parsed.q4 === "number" ? parsed.q4 : base.q4,
        verdicts: typeof parsed.verdicts === "object" && parsed.verdicts !== null ? parsed.verdicts : {},
        added: Array.isArray(parsed.added) ? parsed.added : [],
      };
    } catch {
      return null; // corrupted entry; start fresh rather than crash
    }
  }

  save(taskId: string, draft: Draft): void {
    this.storage.setItem(this.key(taskId), JSON.stringify(draft));
  }

  clear(taskId: string): void {
    this.storage.removeItem(this.key(taskId));
  }
}
