// One task, one screen: context and edited images side by side, the four
// questionnaire parts, and a submit button that only arms once the draft
// satisfies every invariant the server would check.

import { ApiClient, ApiError, NetworkError } from "./api.js";
import { DraftStore } from "./draft.js";
import type { Draft, ProgressPayload, ScaleQuestion, TaskPayload } from "./types.js";
import { emptyDraft } from "./types.js";
import { buildResponse, validateDraft } from "./validate.js";

export interface TaskViewOptions {
  client: ApiClient;
  drafts: DraftStore;
  annotatorId: string;
  onSubmitted: (progress: ProgressPayload) => void;
  now?: () => string;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export class TaskView {
  readonly element: HTMLElement;
  readonly task: TaskPayload;

  private readonly opts: TaskViewOptions;
  private draft: Draft;
  private form!: HTMLFormElement;
  private submitButton!: HTMLButtonElement;
  private banner!: HTMLElement;
  private entityGrid!: HTMLElement;
  private hints: Record<string, HTMLElement> = {};
  private retries = 0;

  constructor(task: TaskPayload, opts: TaskViewOptions) {
    this.task = task;
    this.opts = opts;
    this.draft = opts.drafts.load(task.task_id) ?? emptyDraft();
    this.element = this.render();
    this.refresh();
  }

  getDraft(): Draft {
    return this.draft;
  }

  private persist(): void {
    this.opts.drafts.save(this.task.task_id, this.draft);
    this.refresh();
  }

  // ---- rendering -------------------------------------------------------

  private render(): HTMLElement {
    const root = el("section", "task");
    root.dataset.taskId = this.task.task_id;

    const header = el("header", "task-header");
    header.appendChild(el("h2", "instruction", this.task.instruction));
    header.appendChild(
      el("p", "task-meta", `${this.task.prompt_kind} prompt · task ${this.task.task_id}`),
    );
    root.appendChild(header);

    const pair = el("div", "image-pair");
    pair.appendChild(this.imagePanel("context", "Context image"));
    pair.appendChild(this.imagePanel("edited", "Edited image"));
    root.appendChild(pair);

    const guidelinesToggle = el("button", "guidelines-toggle", "Show guidelines");
    guidelinesToggle.type = "button";
    const guidelinesPanel = el("div", "guidelines-panel", this.task.guidelines);
    guidelinesPanel.hidden = true;
    guidelinesToggle.addEventListener("click", () => {
      guidelinesPanel.hidden = !guidelinesPanel.hidden;
      guidelinesToggle.textContent = guidelinesPanel.hidden ? "Show guidelines" : "Hide guidelines";
    });
    root.appendChild(guidelinesToggle);
    root.appendChild(guidelinesPanel);

    this.form = el("form", "questionnaire");
    this.form.addEventListener("submit", (event) => {
      event.preventDefault();
      void this.attemptSubmit();
    });

    const q = this.task.questionnaire;
    this.form.appendChild(this.scaleFieldset("q1", q.q1));
    this.form.appendChild(this.entityFieldset());
    this.form.appendChild(this.scaleFieldset("q3", q.q3));
    this.form.appendChild(this.scaleFieldset("q4", q.q4));

    this.banner = el("div", "error-banner");
    this.banner.hidden = true;
    this.form.appendChild(this.banner);

    this.submitButton = el("button", "submit-button", "Submit response");
    this.submitButton.type = "submit";
    this.submitButton.disabled = true;
    this.form.appendChild(this.submitButton);

    root.appendChild(this.form);
    return root;
  }

  private imagePanel(which: "context" | "edited", caption: string): HTMLElement {
    const figure = el("figure", `image-panel image-${which}`);
    const img = el("img");
    img.className = `${which}-image`;
    img.alt = caption;
    img.src = this.opts.client.imageUrl(this.task.images[which]);

    const fallback = el("div", "image-fallback");
    fallback.hidden = true;
    fallback.appendChild(el("span", "fallback-text", `${caption} failed to load.`));
    const retry = el("button", "retry-button", "Retry");
    retry.type = "button";
    retry.addEventListener("click", () => {
      this.retries += 1;
      fallback.hidden = true;
      img.hidden = false;
      img.src = `${this.opts.client.imageUrl(this.task.images[which])}?retry=${this.retries}`;
    });
    fallback.appendChild(retry);

    img.addEventListener("error", () => {
      img.hidden = true;
      fallback.hidden = false;
    });

    figure.appendChild(img);
    figure.appendChild(fallback);
    figure.appendChild(el("figcaption", "image-caption", caption));
    return figure;
  }

  private scaleFieldset(key: "q1" | "q3" | "q4", question: ScaleQuestion): HTMLElement {
    const fieldset = el("fieldset", "scale-question");
    fieldset.dataset.question = key;
    fieldset.appendChild(el("legend", "question-title", `${question.part}. ${question.title}`));
    fieldset.appendChild(el("p", "question-text", question.text));

    for (const value of ["1", "2", "3", "4", "5"]) {
      const label = el("label", "anchor");
      const radio = el("input");
      radio.type = "radio";
      radio.name = `${this.task.task_id}:${key}`;
      radio.value = value;
      if (this.draft[key] === Number(value)) radio.checked = true;
      radio.addEventListener("change", () => {
        this.draft[key] = Number(value);
        this.persist();
      });
      label.appendChild(radio);
      label.appendChild(el("span", "anchor-text", `${value} - ${question.anchors[value] ?? ""}`));
      fieldset.appendChild(label);
    }

    const hint = el("span", "inline-hint", "required");
    fieldset.appendChild(hint);
    this.hints[key] = hint;
    return fieldset;
  }

  private entityFieldset(): HTMLElement {
    const q2 = this.task.questionnaire.q2;
    const fieldset = el("fieldset", "entity-question");
    fieldset.dataset.question = "q2";
    fieldset.appendChild(el("legend", "question-title", `${q2.part}. ${q2.title}`));
    fieldset.appendChild(el("p", "question-text", q2.text));

    this.entityGrid = el("div", "entity-grid");
    for (const entity of this.task.seed_entities) {
      this.entityGrid.appendChild(this.entityRow(entity));
    }
    for (let i = 0; i < this.draft.added.length; i += 1) {
      this.entityGrid.appendChild(this.addedRow(i));
    }
    fieldset.appendChild(this.entityGrid);

    // add-entity controls: name field plus verdict, appended as flagged rows
    const addBar = el("div", "add-entity");
    const nameInput = el("input", "add-entity-name");
    nameInput.placeholder = "new or missing entity";
    const verdictSelect = this.verdictSelect("add-entity-verdict");
    const addButton = el("button", "add-entity-button", "Add entity");
    addButton.type = "button";
    addButton.addEventListener("click", () => {
      const name = nameInput.value.trim();
      if (name === "" || verdictSelect.value === "") return;
      this.draft.added.push({ entity: name, verdict: verdictSelect.value });
      this.entityGrid.appendChild(this.addedRow(this.draft.added.length - 1));
      nameInput.value = "";
      verdictSelect.value = "";
      this.persist();
    });
    addBar.appendChild(nameInput);
    addBar.appendChild(verdictSelect);
    addBar.appendChild(addButton);
    fieldset.appendChild(addBar);

    const hint = el("span", "inline-hint", "every entity needs a verdict");
    fieldset.appendChild(hint);
    this.hints.q2 = hint;
    return fieldset;
  }

  private verdictSelect(className: string): HTMLSelectElement {
    const select = el("select", className);
    const blank = el("option", undefined, "choose verdict");
    blank.value = "";
    select.appendChild(blank);
    for (const verdict of this.task.questionnaire.q2.verdicts) {
      const option = el("option", undefined, verdict.replace(/_/g, " "));
      option.value = verdict;
      select.appendChild(option);
    }
    return select;
  }

  private entityRow(entity: string): HTMLElement {
    const row = el("div", "entity-row");
    row.dataset.entity = entity;
    row.appendChild(el("span", "entity-name", entity));
    const select = this.verdictSelect("verdict-select");
    const existing = this.draft.verdicts[entity];
    if (existing !== undefined) select.value = existing;
    select.addEventListener("change", () => {
      if (select.value === "") {
        delete this.draft.verdicts[entity];
      } else {
        this.draft.verdicts[entity] = select.value;
      }
      this.persist();
    });
    row.appendChild(select);
    return row;
  }

  private addedRow(index: number): HTMLElement {
    const entry = this.draft.added[index];
    const row = el("div", "entity-row added-row");
    row.dataset.entity = entry?.entity ?? "";
    row.dataset.added = "true";
    row.appendChild(el("span", "entity-name", entry?.entity ?? ""));
    row.appendChild(el("span", "added-flag", "added by you"));
    const select = this.verdictSelect("verdict-select");
    select.value = entry?.verdict ?? "";
    select.addEventListener("change", () => {
      const target = this.draft.added[index];
      if (target) target.verdict = select.value;
      this.persist();
    });
    row.appendChild(select);
    const remove = el("button", "remove-entity-button", "Remove");
    remove.type = "button";
    remove.addEventListener("click", () => {
      this.draft.added.splice(index, 1);
      this.rebuildGrid();
      this.persist();
    });
    row.appendChild(remove);
    return row;
  }

  private rebuildGrid(): void {
    this.entityGrid.replaceChildren();
    for (const entity of this.task.seed_entities) {
      this.entityGrid.appendChild(this.entityRow(entity));
    }
    for (let i = 0; i < this.draft.added.length; i += 1) {
      this.entityGrid.appendChild(this.addedRow(i));
    }
  }

  // ---- validation and submission ---------------------------------------

  private refresh(): void {
    const state = validateDraft(this.draft, this.task);
    this.submitButton.disabled = !state.complete;
    this.hints.q1!.hidden = state.q1;
    this.hints.q3!.hidden = state.q3;
    this.hints.q4!.hidden = state.q4;
    const entitiesOk = Object.values(state.entities).every(Boolean);
    const addedOk = !state.problems.some((p) => p.startsWith("added entity"));
    this.hints.q2!.hidden = entitiesOk && addedOk;
  }

  showError(message: string): void {
    this.banner.textContent = message;
    this.banner.hidden = false;
  }

  async attemptSubmit(): Promise<void> {
    const state = validateDraft(this.draft, this.task);
    if (!state.complete) {
      this.refresh(); // incomplete drafts never leave the browser
      return;
    }
    const now = this.opts.now ?? (() => new Date().toISOString());
    const payload = buildResponse(this.draft, this.task, this.opts.annotatorId, now());
    this.submitButton.disabled = true;
    this.banner.hidden = true;
    try {
      const progress = await this.opts.client.submitResponse(payload);
      this.opts.drafts.clear(this.task.task_id);
      this.opts.onSubmitted(progress);
    } catch (err) {
      if (err instanceof ApiError) {
        this.showError(`${err.code}: ${err.message}`);
      } else if (err instanceof NetworkError) {
        this.showError("network failure; your answers are kept locally, try again");
      } else {
        throw err;
      }
      this.refresh(); // draft untouched, submit re-arms
    }
  }
}

export function renderTask(container: HTMLElement, task: TaskPayload, opts: TaskViewOptions): TaskView {
  const view = new TaskView(task, opts);
  container.replaceChildren(view.element);
  return view;
}
