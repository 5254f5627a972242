// DOM rendering for one rating panel.
//
// Stimuli appear in the server-given slot order under the server-given
// neutral labels; nothing in the payload names a system, so nothing here
// can leak one. Sliders are native range inputs (keyboard accessible,
// 1-point steps) and the value sent is the value shown.

import { PanelViewState } from "./state.js";
import type { PanelPayload } from "./types.js";

const PROMPTS = {
  naturalness: "Rate each sample's naturalness from 0 (bad) to 100 (excellent).",
  similarity:
    "Compared with the reference, rate each sample from 0 " +
    "(definitely a different person) to 100 (definitely the same person).",
};

export interface PanelView {
  state: PanelViewState;
  submitButton: HTMLButtonElement;
  statusLine: HTMLElement;
  audios: HTMLAudioElement[];
  refresh(): void;
}

export function renderPanel(
  root: HTMLElement,
  panel: PanelPayload,
  onSubmit: (scores: Record<string, number>) => void,
  resolveUrl: (path: string) => string = (p) => p,
): PanelView {
  const state = new PanelViewState(panel.slots.length);
  root.replaceChildren();

  const prompt = document.createElement("p");
  prompt.className = "prompt";
  prompt.textContent = PROMPTS[panel.mode];
  root.appendChild(prompt);

  const sentence = document.createElement("p");
  sentence.className = "sentence";
  sentence.textContent = `Sentence: “${panel.sentence_text}”`;
  root.appendChild(sentence);

  if (panel.mode === "similarity" && panel.reference_url !== null) {
    const ref = document.createElement("div");
    ref.className = "reference";
    const refLabel = document.createElement("span");
    refLabel.textContent = "Reference (target speaker)";
    const refAudio = document.createElement("audio");
    refAudio.controls = true;
    refAudio.preload = "auto";
    refAudio.src = resolveUrl(panel.reference_url);
    ref.append(refLabel, refAudio);
    root.appendChild(ref);
  }

  const list = document.createElement("div");
  list.className = "slots";
  root.appendChild(list);

  const statusLine = document.createElement("p");
  statusLine.className = "status";
  statusLine.setAttribute("role", "status");

  const submitButton = document.createElement("button");
  submitButton.type = "button";
  submitButton.className = "submit";
  submitButton.textContent = "Submit ratings";

  const audios: HTMLAudioElement[] = [];

  const refresh = () => {
    const blockers = state.blockers();
    submitButton.disabled = !state.canSubmit();
    statusLine.textContent = state.submitting
      ? "Submitting…"
      : blockers.join("; ");
  };

  panel.slots.forEach((slotPayload, index) => {
    const row = document.createElement("div");
    row.className = "slot";
    row.dataset.slot = String(slotPayload.slot);

    const label = document.createElement("span");
    label.className = "slot-label";
    label.textContent = slotPayload.label;

    const audio = document.createElement("audio");
    audio.controls = true;
    audio.preload = "auto";
    audio.src = resolveUrl(slotPayload.stimulus_url);
    audio.addEventListener("play", () => {
      state.markPlayed(index);
      refresh();
    });
    audio.addEventListener("error", () => {
      state.markError(index, "failed to load");
      row.classList.add("unplayable");
      note.textContent = "sample failed to load";
      refresh();
    });
    audios.push(audio);

    const slider = document.createElement("input");
    slider.type = "range";
    slider.min = "0";
    slider.max = "100";
    slider.step = "1";
    slider.value = String(state.slots[index]!.value);
    slider.setAttribute("aria-label", `score for sample ${slotPayload.label}`);

    const valueOut = document.createElement("output");
    valueOut.textContent = "–"; // en dash until touched
    slider.addEventListener("input", () => {
      state.setValue(index, Number(slider.value));
      slider.value = String(state.slots[index]!.value);
      valueOut.textContent = slider.value;
      refresh();
    });

    const note = document.createElement("span");
    note.className = "slot-note";

    row.append(label, audio, slider, valueOut, note);
    list.appendChild(row);
  });

  submitButton.addEventListener("click", () => {
    if (!state.canSubmit()) return;
    state.submitting = true; // double clicks land here and bounce off
    refresh();
    onSubmit(state.scores());
  });

  root.append(statusLine, submitButton);
  refresh();
  return { state, submitButton, statusLine, audios, refresh };
}
