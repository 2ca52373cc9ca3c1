// @vitest-environment jsdom

// End-to-end contract check against the real annotation service: the DOM
// drives one instance while plain scripted HTTP drives a second one built
// from the same corpus, and the two stored response lines must be
// byte-identical. Needs python3 with the package installed.

import { type ChildProcess, spawn } from "node:child_process";
import { mkdtempSync, readFileSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it, vi } from "vitest";

import { startApp } from "../src/app.js";
import type { EntityVerdictPayload, TaskPayload } from "../src/types.js";
import { MemoryStorage } from "./helpers.js";

// vitest runs with the package root as cwd
const FIXTURE = join(process.cwd(), "tests", "serve_fixture.py");
const EPOCH = "1970-01-01T00:00:00+00:00";

interface Service {
  proc: ChildProcess;
  root: string;
  base: string;
  studyId: string;
  token: string;
}

function startService(): Promise<Service> {
  return new Promise((resolve, reject) => {
    const root = mkdtempSync(join(tmpdir(), "ui-contract-"));
    const proc = spawn("python3", [FIXTURE, "--root", root, "--annotators", "alice"], {
      env: { ...process.env, SOURCE_DATE_EPOCH: "0" },
      stdio: ["ignore", "pipe", "inherit"],
    });
    let buf = "";
    proc.stdout?.on("data", (chunk: Buffer) => {
      buf += String(chunk);
      const nl = buf.indexOf("\n");
      if (nl < 0) return;
      try {
        const info = JSON.parse(buf.slice(0, nl));
        resolve({
          proc,
          root,
          base: `http://127.0.0.1:${info.port}`,
          studyId: info.study_id,
          token: info.tokens.alice,
        });
      } catch (err) {
        reject(err instanceof Error ? err : new Error(String(err)));
      }
    });
    proc.on("error", reject);
    proc.on("exit", (code) => reject(new Error(`fixture exited early (${code})`)));
  });
}

async function waitReady(service: Service): Promise<void> {
  for (let attempt = 0; attempt < 150; attempt += 1) {
    try {
      const resp = await fetch(`${service.base}/studies/${service.studyId}/progress`);
      if (resp.ok) return;
    } catch {
      // server not listening yet
    }
    await new Promise((r) => setTimeout(r, 100));
  }
  throw new Error(`service at ${service.base} never became ready`);
}

function storedLines(service: Service): string[] {
  const text = readFileSync(join(service.root, "store", `${service.studyId}.jsonl`), "utf8");
  return text.split("\n").filter((line) => line !== "");
}

// Deterministic answers used by both the DOM and the scripted run.
const ANSWERS = { q1: 4, q3: 5, q4: 3 };
const verdictFor = (index: number): string =>
  index === 0 ? "correct_change" : "correct_preservation";
const ADDED = { entity: "magazine", verdict: "missing" };

let uiService: Service;
let rawService: Service;
let container: HTMLElement;
let firstTaskId: string;

beforeAll(async () => {
  [uiService, rawService] = await Promise.all([startService(), startService()]);
  await Promise.all([waitReady(uiService), waitReady(rawService)]);
}, 60_000);

afterAll(() => {
  for (const service of [uiService, rawService]) {
    if (!service) continue;
    service.proc.kill("SIGTERM");
    rmSync(service.root, { recursive: true, force: true });
  }
});

describe("UI contract", () => {
  it(
    "one full task through the DOM stores the same bytes as scripted HTTP",
    async () => {
      container = document.createElement("div");
      document.body.appendChild(container);
      void startApp(container, {
        baseUrl: uiService.base,
        studyId: uiService.studyId,
        annotatorId: "alice",
        token: uiService.token,
        storage: new MemoryStorage(),
        now: () => EPOCH,
      });

      await vi.waitFor(() => {
        expect(container.querySelector(".task")).not.toBeNull();
      }, 10_000);
      const taskEl = container.querySelector<HTMLElement>(".task");
      firstTaskId = taskEl?.dataset.taskId ?? "";
      expect(firstTaskId).not.toBe("");

      // Q1, Q3, Q4 through the labeled radio groups.
      for (const [q, value] of Object.entries(ANSWERS)) {
        const radio = container.querySelector<HTMLInputElement>(
          `fieldset[data-question="${q}"] input[value="${value}"]`,
        );
        if (!radio) throw new Error(`no radio ${q}=${value}`);
        radio.click();
      }

      // A verdict for every listed entity, in served order.
      const rows = [...container.querySelectorAll<HTMLElement>(".entity-row")];
      expect(rows.length).toBeGreaterThan(0);
      rows.forEach((row, index) => {
        const select = row.querySelector<HTMLSelectElement>("select.verdict-select");
        if (!select) throw new Error("row without verdict select");
        select.value = verdictFor(index);
        select.dispatchEvent(new Event("change"));
      });

      // One annotator-added entity.
      const name = container.querySelector<HTMLInputElement>(".add-entity-name");
      const addVerdict = container.querySelector<HTMLSelectElement>("select.add-entity-verdict");
      const addButton = container.querySelector<HTMLButtonElement>(".add-entity-button");
      if (!name || !addVerdict || !addButton) throw new Error("missing add-entity controls");
      name.value = ADDED.entity;
      addVerdict.value = ADDED.verdict;
      addButton.click();
      expect(container.querySelector(".added-row")).not.toBeNull();

      const submit = container.querySelector<HTMLButtonElement>(".submit-button");
      if (!submit) throw new Error("no submit button");
      expect(submit.disabled).toBe(false);
      submit.click();

      // Accepted submissions auto-advance to the next task.
      await vi.waitFor(() => {
        const current = container.querySelector<HTMLElement>(".task");
        expect(current?.dataset.taskId).not.toBe(firstTaskId);
      }, 10_000);

      // Scripted equivalent against the second instance: same corpus, same
      // annotator name, same answers, no UI involved.
      const auth = { Authorization: `Bearer ${rawService.token}` };
      const nextResp = await fetch(
        `${rawService.base}/studies/${rawService.studyId}/next?annotator=alice`,
        { headers: auth },
      );
      expect(nextResp.ok).toBe(true);
      const task = (await nextResp.json()).task as TaskPayload;
      expect(task.task_id).toBe(firstTaskId);

      const verdicts: EntityVerdictPayload[] = task.seed_entities.map((entity, index) => ({
        entity,
        verdict: verdictFor(index),
        added_by_annotator: false,
        raw: verdictFor(index),
      }));
      verdicts.push({ ...ADDED, added_by_annotator: true, raw: ADDED.verdict });
      const postResp = await fetch(
        `${rawService.base}/studies/${rawService.studyId}/responses`,
        {
          method: "POST",
          headers: { ...auth, "Content-Type": "application/json" },
          body: JSON.stringify({
            task_id: task.task_id,
            annotator_id: "alice",
            q1_instruction_following: ANSWERS.q1,
            q2_entity_verdicts: verdicts,
            q3_preservation: ANSWERS.q3,
            q4_quality: ANSWERS.q4,
            timestamp: EPOCH,
          }),
        },
      );
      expect(postResp.ok).toBe(true);

      const uiLines = storedLines(uiService);
      const rawLines = storedLines(rawService);
      expect(uiLines).toHaveLength(1);
      expect(rawLines).toHaveLength(1);
      expect(uiLines[0]).toBe(rawLines[0]);
    },
    30_000,
  );

  it(
    "an incomplete draft cannot be submitted",
    async () => {
      // The app advanced to the next task; answer everything except Q3.
      const taskEl = container.querySelector<HTMLElement>(".task");
      expect(taskEl).not.toBeNull();
      for (const [q, value] of [
        ["q1", 2],
        ["q4", 4],
      ] as const) {
        container
          .querySelector<HTMLInputElement>(`fieldset[data-question="${q}"] input[value="${value}"]`)
          ?.click();
      }
      for (const row of container.querySelectorAll<HTMLElement>(".entity-row")) {
        const select = row.querySelector<HTMLSelectElement>("select.verdict-select");
        if (!select) throw new Error("row without verdict select");
        select.value = "incorrect";
        select.dispatchEvent(new Event("change"));
      }

      const submit = container.querySelector<HTMLButtonElement>(".submit-button");
      if (!submit) throw new Error("no submit button");
      expect(submit.disabled).toBe(true);
      const hint = container.querySelector<HTMLElement>(
        'fieldset[data-question="q3"] .inline-hint',
      );
      expect(hint?.hidden).toBe(false);

      // Neither a click on the disabled button nor a forced submit event may
      // reach the network.
      const realFetch = globalThis.fetch;
      let dispatches = 0;
      globalThis.fetch = (async (...args: Parameters<typeof fetch>) => {
        dispatches += 1;
        return realFetch(...args);
      }) as typeof fetch;
      try {
        submit.click();
        container
          .querySelector("form.questionnaire")
          ?.dispatchEvent(new Event("submit", { cancelable: true }));
        await new Promise((r) => setTimeout(r, 200));
      } finally {
        globalThis.fetch = realFetch;
      }
      expect(dispatches).toBe(0);
      expect(storedLines(uiService)).toHaveLength(1);
    },
    30_000,
  );
});
