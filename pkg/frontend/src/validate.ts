// Client-side mirror of the server's HumanResponse validation. The submit
// button stays disabled until this passes, so the UI cannot produce a
// request the service would reject for shape reasons.

import type { Draft, EntityVerdictPayload, HumanResponsePayload, TaskPayload } from "./types.js";

// Matches the server's entity normalization: case, surrounding space, and
// internal runs of whitespace are ignored when names are compared.
export function normalizeEntity(name: string): string {
  return name.trim().toLowerCase().replace(/\s+/g, " ");
}

export function scaleOk(value: number | null): boolean {
  return value !== null && Number.isInteger(value) && value >= 1 && value <= 5;
}

export interface ValidationState {
  q1: boolean;
  q3: boolean;
  q4: boolean;
  entities: Record<string, boolean>; // seed entity -> verdict present
  complete: boolean;
  problems: string[];
}

export function validateDraft(draft: Draft, task: TaskPayload): ValidationState {
  const verdictVocab = new Set(task.questionnaire.q2.verdicts);
  const problems: string[] = [];

  const entities: Record<string, boolean> = {};
  for (const entity of task.seed_entities) {
    const verdict = draft.verdicts[entity];
    const ok = verdict !== undefined && verdictVocab.has(verdict);
    entities[entity] = ok;
    if (!ok) problems.push(`entity "${entity}" needs a verdict`);
  }

  const seen = new Set(task.seed_entities.map(normalizeEntity));
  for (const row of draft.added) {
    const key = normalizeEntity(row.entity);
    if (key === "") {
      problems.push("added entity needs a name");
    } else if (seen.has(key)) {
      problems.push(`added entity "${row.entity}" duplicates another row`);
    } else {
      seen.add(key);
    }
    if (!verdictVocab.has(row.verdict)) {
      problems.push(`added entity "${row.entity}" needs a verdict`);
    }
  }

  const q1 = scaleOk(draft.q1);
  const q3 = scaleOk(draft.q3);
  const q4 = scaleOk(draft.q4);
  if (!q1) problems.push("Q1 needs an answer");
  if (!q3) problems.push("Q3 needs an answer");
  if (!q4) problems.push("Q4 needs an answer");

  return { q1, q3, q4, entities, complete: problems.length === 0, problems };
}

// Assemble the wire payload from a complete draft. Seed verdicts come first
// in task order, then added rows in insertion order, mirroring the form.
export function buildResponse(
  draft: Draft,
  task: TaskPayload,
  annotatorId: string,
  timestamp: string,
): HumanResponsePayload {
  const state = validateDraft(draft, task);
  if (!state.complete) {
    throw new Error(`draft incomplete: ${state.problems.join("; ")}`);
  }
  const verdicts: EntityVerdictPayload[] = task.seed_entities.map((entity) => ({
    entity,
    verdict: draft.verdicts[entity] as string,
    added_by_annotator: false,
    raw: draft.verdicts[entity] as string,
  }));
  for (const row of draft.added) {
    verdicts.push({
      entity: row.entity.trim(),
      verdict: row.verdict,
      added_by_annotator: true,
      raw: row.verdict,
    });
  }
  return {
    task_id: task.task_id,
    annotator_id: annotatorId,
    q1_instruction_following: draft.q1 as number,
    q2_entity_verdicts: verdicts,
    q3_preservation: draft.q3 as number,
    q4_quality: draft.q4 as number,
    timestamp,
  };
}
