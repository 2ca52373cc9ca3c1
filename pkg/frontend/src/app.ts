// Boot flow: read the session from the query string (or ask for it), then
// serve one task at a time, auto-advancing after each accepted submission.

import { ApiClient, ApiError, NetworkError } from "./api.js";
import { DraftStore, StorageLike } from "./draft.js";
import type { ProgressPayload } from "./types.js";
import { renderTask } from "./view.js";

export interface AppConfig {
  baseUrl: string;
  studyId: string;
  annotatorId: string;
  token: string;
  storage: StorageLike;
  now?: () => string;
  fetchImpl?: typeof fetch;
}

function el(tag: string, className: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function renderDone(container: HTMLElement, progress: ProgressPayload | null): void {
  const panel = el("section", "done-panel");
  panel.appendChild(el("h2", "done-title", "All tasks complete"));
  const detail =
    progress === null
      ? "Nothing left to annotate in this study."
      : `${progress.submitted} of ${progress.target_responses} responses recorded. Thank you.`;
  panel.appendChild(el("p", "done-detail", detail));
  container.replaceChildren(panel);
}

function renderFatal(container: HTMLElement, message: string, retry: () => void): void {
  const panel = el("section", "fatal-panel");
  panel.appendChild(el("p", "fatal-message", message));
  const button = document.createElement("button");
  button.className = "retry-button";
  button.type = "button";
  button.textContent = "Retry";
  button.addEventListener("click", retry);
  panel.appendChild(button);
  container.replaceChildren(panel);
}

export async function startApp(container: HTMLElement, config: AppConfig): Promise<void> {
  const client = new ApiClient(
    {
      baseUrl: config.baseUrl,
      studyId: config.studyId,
      annotatorId: config.annotatorId,
      token: config.token,
    },
    config.fetchImpl,
  );
  const drafts = new DraftStore(config.storage, config.studyId, config.annotatorId);

  return new Promise<void>((resolve, reject) => {
    const advance = (): void => {
      client
        .nextTask()
        .then((next) => {
          if (next.done || next.task === null) {
            return client
              .progress()
              .catch(() => null)
              .then((progress) => {
                renderDone(container, progress);
                resolve();
              });
          }
          renderTask(container, next.task, {
            client,
            drafts,
            annotatorId: config.annotatorId,
            now: config.now,
            onSubmitted: () => advance(),
          });
          return undefined;
        })
        .catch((err: unknown) => {
          if (err instanceof ApiError) {
            renderFatal(container, `${err.code}: ${err.message}`, advance);
          } else if (err instanceof NetworkError) {
            renderFatal(container, "cannot reach the annotation service", advance);
          } else {
            reject(err instanceof Error ? err : new Error(String(err)));
          }
        });
    };
    advance();
  });
}

function renderJoinForm(container: HTMLElement): void {
  const form = document.createElement("form");
  form.className = "join-form";
  form.appendChild(el("h2", "join-title", "Join a study"));

  const fields: Array<[string, string]> = [
    ["study", "Study id"],
    ["annotator", "Annotator id"],
    ["token", "Access token"],
  ];
  const inputs: Record<string, HTMLInputElement> = {};
  for (const [name, label] of fields) {
    const wrap = el("label", "join-field", label);
    const input = document.createElement("input");
    input.name = name;
    input.required = true;
    wrap.appendChild(input);
    form.appendChild(wrap);
    inputs[name] = input;
  }

  const go = document.createElement("button");
  go.type = "submit";
  go.className = "join-button";
  go.textContent = "Start annotating";
  form.appendChild(go);

  form.addEventListener("submit", (event) => {
    event.preventDefault();
    const params = new URLSearchParams({
      study: inputs.study!.value.trim(),
      annotator: inputs.annotator!.value.trim(),
      token: inputs.token!.value.trim(),
    });
    window.location.search = params.toString();
  });

  container.replaceChildren(form);
}

export function boot(): void {
  const container = document.getElementById("app");
  if (container === null) return;
  const params = new URLSearchParams(window.location.search);
  const studyId = params.get("study");
  const annotatorId = params.get("annotator");
  const token = params.get("token");
  if (studyId === null || annotatorId === null || token === null) {
    renderJoinForm(container);
    return;
  }
  void startApp(container, {
    baseUrl: "",
    studyId,
    annotatorId,
    token,
    storage: window.localStorage,
  });
}
