// App shell: join a test, rate panels until the service says done.
//
// One idempotency token is minted per dispensed panel and reused for every
// retry of that panel's submission, so a double click or a dropped ack
// never persists twice. A validation rejection (400) keeps the panel on
// screen with the server's message; a quota conflict (409) moves on, since
// it means the panel filled while we were rating.

import { ApiClient, ApiError, makeToken } from "./api.js";
import { renderPanel } from "./panel.js";
import type { PanelPayload } from "./types.js";

function el(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (node === null) throw new Error(`missing #${id}`);
  return node;
}

function showMessage(text: string, isError = false): void {
  const box = el("message");
  box.textContent = text;
  box.classList.toggle("error", isError);
}

async function ratePanel(
  api: ApiClient,
  sessionId: string,
  panel: PanelPayload,
  mount: HTMLElement,
): Promise<void> {
  const token = makeToken();
  await new Promise<void>((resolve) => {
    const view = renderPanel(mount, panel, async (scores) => {
      try {
        await api.submitRatings(sessionId, panel.panel_id, scores, token);
        resolve();
      } catch (failure) {
        if (failure instanceof ApiError && failure.status === 409) {
          showMessage("This panel just filled up; moving on.", false);
          resolve();
          return;
        }
        view.state.submitting = false;
        view.refresh();
        showMessage(
          failure instanceof Error ? failure.message : "submission failed",
          true,
        );
      }
    }, (path) => api.audioUrl(path));
  });
}

async function runSession(api: ApiClient, testId: string, raterId: string): Promise<void> {
  const session = await api.createSession(testId, raterId || undefined);
  el("join").hidden = true;
  const mount = el("panel");
  for (;;) {
    const next = await api.nextPanel(session.session_id);
    if (next.done) break;
    showMessage("");
    await ratePanel(api, session.session_id, next, mount);
  }
  mount.replaceChildren();
  el("done").hidden = false;
}

export function boot(): void {
  const api = new ApiClient("");
  const params = new URLSearchParams(window.location.search);
  const testInput = el("test-id") as HTMLInputElement;
  testInput.value = params.get("test") ?? "";

  el("join-form").addEventListener("submit", (event) => {
    event.preventDefault();
    const raterInput = el("rater-id") as HTMLInputElement;
    runSession(api, testInput.value.trim(), raterInput.value.trim()).catch(
      (failure) => {
        showMessage(
          failure instanceof Error ? failure.message : "could not join test",
          true,
        );
        el("join").hidden = false;
      },
    );
  });
}

if (typeof document !== "undefined" && document.getElementById("join-form")) {
  boot();
}
