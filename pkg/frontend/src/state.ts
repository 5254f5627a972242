// Per-panel view state and the completeness gate.
//
// The gate is the client-side half of a contract the server re-validates:
// submit stays disabled until every stimulus has been played at least once
// and every slider has been touched. An unplayable stimulus (load error)
// blocks the whole panel, since a rating of unheard audio is meaningless.

export interface SlotState {
  played: boolean;
  touched: boolean;
  value: number;
  error: string | null;
}

/** Clamp to [0, 100] and snap to whole points; transport stays integer. */
export function clampScore(raw: number): number {
  if (!Number.isFinite(raw)) return 0;
  return Math.min(100, Math.max(0, Math.round(raw)));
}

export class PanelViewState {
  readonly slots: SlotState[];
  submitting = false;

  constructor(slotCount: number, initialValue = 50) {
    this.slots = Array.from({ length: slotCount }, () => ({
      played: false,
      touched: false,
      value: clampScore(initialValue),
      error: null,
    }));
  }

  private slot(index: number): SlotState {
    const s = this.slots[index];
    if (s === undefined) throw new Error(`no slot ${index}`);
    return s;
  }

  markPlayed(index: number): void {
    this.slot(index).played = true;
  }

  markError(index: number, message: string): void {
    this.slot(index).error = message;
  }

  /** Record a slider move. The stored value is exactly what the UI shows. */
  setValue(index: number, raw: number): void {
    const s = this.slot(index);
    s.value = clampScore(raw);
    s.touched = true;
  }

  canSubmit(): boolean {
    return (
      !this.submitting &&
      this.slots.every((s) => s.played && s.touched && s.error === null)
    );
  }

  /** Human-readable reasons the gate is closed, for the status line. */
  blockers(): string[] {
    const out: string[] = [];
    const unplayed = this.slots.filter((s) => s.played === false && s.error === null).length;
    const untouched = this.slots.filter((s) => s.touched === false).length;
    const broken = this.slots.filter((s) => s.error !== null).length;
    if (broken > 0) out.push(`${broken} sample(s) failed to load`);
    if (unplayed > 0) out.push(`play all samples (${unplayed} left)`);
    if (untouched > 0) out.push(`move every slider (${untouched} left)`);
    return out;
  }

  /** Scores keyed by slot index, exactly as displayed. */
  scores(): Record<string, number> {
    const out: Record<string, number> = {};
    this.slots.forEach((s, i) => {
      out[String(i)] = s.value;
    });
    return out;
  }
}
