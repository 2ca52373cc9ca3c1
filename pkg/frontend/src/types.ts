// Payload shapes of the annotation service HTTP API. The UI talks to the
// service exclusively through these; nothing here is invented client-side.

export interface ScaleQuestion {
  part: string;
  title: string;
  text: string;
  anchors: Record<string, string>;
}

export interface VerdictQuestion {
  part: string;
  title: string;
  text: string;
  verdicts: string[];
}

export interface Questionnaire {
  q1: ScaleQuestion;
  q2: VerdictQuestion;
  q3: ScaleQuestion;
  q4: ScaleQuestion;
}

export interface TaskPayload {
  task_id: string;
  sample_id: string;
  model_id: string;
  prompt_kind: string;
  instruction: string;
  seed_entities: string[];
  guidelines: string;
  questionnaire: Questionnaire;
  images: { context: string; edited: string };
}

export interface NextTaskPayload {
  done: boolean;
  task: TaskPayload | null;
}

export interface EntityVerdictPayload {
  entity: string;
  verdict: string;
  added_by_annotator: boolean;
  raw: string | null;
}

export interface HumanResponsePayload {
  task_id: string;
  annotator_id: string;
  q1_instruction_following: number;
  q2_entity_verdicts: EntityVerdictPayload[];
  q3_preservation: number;
  q4_quality: number;
  timestamp: string;
}

export interface ProgressPayload {
  target_responses: number;
  submitted: number;
  per_task: Record<string, number>;
  done: boolean;
}

// Local working state for one task. Scales stay null until answered;
// verdicts map seed entity -> chosen verdict; added rows carry their own
// entity names and are flagged added_by_annotator on submit.
export interface Draft {
  q1: number | null;
  q3: number | null;
  q4: number | null;
  verdicts: Record<string, string>;
  added: { entity: string; verdict: string }[];
}

export function emptyDraft(): Draft {
  return { q1: null, q3: null, q4: null, verdicts: {}, added: [] };
}
