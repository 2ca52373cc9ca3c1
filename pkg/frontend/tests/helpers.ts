// Shared fixtures for the UI tests: a task payload shaped like the service's
// wire format, an in-memory Storage stand-in, and a fully answered draft.

import type { Draft, Questionnaire, TaskPayload } from "../src/types.js";
import type { StorageLike } from "../src/draft.js";

export function makeQuestionnaire(): Questionnaire {
  return {
    q1: {
      part: "A",
      title: "Instruction Following",
      text: "How well does the edited image follow the given instruction overall?",
      anchors: {
        "1": "Not followed at all",
        "2": "Mostly not followed",
        "3": "Partially followed",
        "4": "Mostly followed",
        "5": "Fully followed",
      },
    },
    q2: {
      part: "A",
      title: "Entity-Level Check",
      text: "For every listed entity, verify whether it was correctly changed or correctly preserved.",
      verdicts: ["correct_change", "correct_preservation", "incorrect", "missing"],
    },
    q3: {
      part: "B",
      title: "Preservation",
      text: "How accurately were areas unrelated to the instruction preserved?",
      anchors: {
        "1": "Severe unintended changes",
        "2": "Many unintended changes",
        "3": "Some unintended changes",
        "4": "Minor unintended changes",
        "5": "No unintended changes",
      },
    },
    q4: {
      part: "B",
      title: "Quality",
      text: "Rate the overall realism and visual quality compared to the original image.",
      anchors: {
        "1": "Very poor",
        "2": "Poor",
        "3": "Acceptable",
        "4": "Good",
        "5": "Excellent",
      },
    },
  };
}

export function makeTask(overrides: Partial<TaskPayload> = {}): TaskPayload {
  return {
    task_id: "t-0001",
    sample_id: "s-01",
    model_id: "m-a",
    prompt_kind: "abstract",
    instruction: "Make the room feel calmer.",
    seed_entities: ["lamp", "rug", "window"],
    guidelines: "Compare the context image (left) with the edited image (right).",
    questionnaire: makeQuestionnaire(),
    images: {
      context: "tasks/t-0001/images/context",
      edited: "tasks/t-0001/images/edited",
    },
    ...overrides,
  };
}

export function completeDraft(task: TaskPayload): Draft {
  const verdicts: Record<string, string> = {};
  for (const entity of task.seed_entities) verdicts[entity] = "correct_preservation";
  return { q1: 4, q3: 5, q4: 3, verdicts, added: [] };
}

export class MemoryStorage implements StorageLike {
  private readonly map = new Map<string, string>();

  getItem(key: string): string | null {
    return this.map.has(key) ? (this.map.get(key) as string) : null;
  }

  setItem(key: string, value: string): void {
    this.map.set(key, value);
  }

  removeItem(key: string): void {
    this.map.delete(key);
  }

  get size(): number {
    return this.map.size;
  }

  keys(): string[] {
    return [...this.map.keys()];
  }
}

export function jsonResponse(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}
