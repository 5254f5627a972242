// Shapes of the listening-test service's JSON payloads, mirrored from the
// service's documented API. The client never sees system identities: slots
// carry only a position, a display label, and an opaque stimulus URL.

export interface SlotPayload {
  slot: number;
  label: string;
  stimulus_url: string;
}

export type TestMode = "naturalness" | "similarity";

export interface PanelPayload {
  done: false;
  panel_id: string;
  mode: TestMode;
  sentence_text: string;
  reference_url: string | null;
  slots: SlotPayload[];
}

export interface DoneMarker {
  done: true;
}

export type NextPanelResponse = PanelPayload | DoneMarker;

export interface SessionInfo {
  session_id: string;
  test_id: string;
  rater_id: string;
}

export interface SubmitResult {
  status: "ok" | "duplicate";
  panel_id: string;
}
