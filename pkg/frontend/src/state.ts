import type { ApiError, Client } from "./api.js";
import type { SearchRequest, SearchResponse } from "./types.js";

export const WEIGHT_STEP = 0.05;
export const DEBOUNCE_MS = 250;

/** Snap a raw slider value onto the 0.05 grid, clamped to [0, 1]. */
export function snapWeight(raw: number): number {
  const snapped = Math.round(raw / WEIGHT_STEP) * WEIGHT_STEP;
  const clamped = Math.min(1, Math.max(0, snapped));
  // two decimals so 0.15000000000000002 never reaches the wire
  return Math.round(clamped * 100) / 100;
}

export interface ConsoleState {
  selectedQueryId: number | null;
  text: string;
  weight: number;
  k: number;
  lastResponse: SearchResponse | null;
  inFlight: boolean;
}

export type ColumnOutcome =
  | { ok: true; response: SearchResponse }
  | { ok: false; error: ApiError };

export interface ControllerEvents {
  /** Fired on every state change, including in-flight transitions. */
  onState(state: Readonly<ConsoleState>): void;
  /** Fired only for the response matching the newest request. */
  onResponse(response: SearchResponse): void;
  /** Fired only for an error on the newest request. */
  onError(error: ApiError): void;
  /** Fired when both compare columns settle and the panel is still current. */
  onCompare(left: ColumnOutcome, right: ColumnOutcome): void;
}

/** Build the wire request for the current state; empty text is omitted. */
export function buildRequest(state: ConsoleState): SearchRequest {
  const request: SearchRequest = {
    query_image_id: state.selectedQueryId ?? undefined,
    k: state.k,
  };
  const text = state.text.trim();
  if (text !== "") {
    request.query_text = text;
    request.query_weight = state.weight;
  }
  return request;
}

/**
 * Drives searches from console state. Text and slider edits debounce for
 * DEBOUNCE_MS; selection and the explicit search button fire at once.
 * Every request carries a sequence number and only the response matching
 * the newest request is delivered — anything older is dropped on arrival.
 */
export class SearchController {
  readonly state: ConsoleState;
  private seq = 0;
  private compareSeq = 0;
  private timer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private readonly client: Client,
    private readonly events: ControllerEvents,
  ) {
    this.state = {
      selectedQueryId: null,
      text: "",
      weight: 1.0,
      k: 10,
      lastResponse: null,
      inFlight: false,
    };
  }

  /** Select a gallery item: prior results clear, a fresh search fires. */
  selectQuery(queryId: number): void {
    this.cancelPending();
    this.compareSeq++;
    this.state.selectedQueryId = queryId;
    this.state.lastResponse = null;
    this.events.onState(this.state);
    this.searchNow();
  }

  setText(text: string): void {
    this.state.text = text;
    this.events.onState(this.state);
    this.schedule();
  }

  setWeight(raw: number): void {
    this.state.weight = snapWeight(raw);
    this.events.onState(this.state);
    this.schedule();
  }

  setK(k: number): void {
    this.state.k = Math.max(1, Math.floor(k));
    this.events.onState(this.state);
    this.schedule();
  }

  /** Explicit search: fires immediately, cancelling any pending debounce. */
  searchNow(): void {
    this.cancelPending();
    if (this.state.selectedQueryId === null) return;
    const id = ++this.seq;
    this.state.inFlight = true;
    this.events.onState(this.state);
    this.client.search(buildRequest(this.state)).then(
      (response) => this.settle(id, { ok: true, response }),
      (error) => this.settle(id, { ok: false, error: error as ApiError }),
    );
  }

  /** Image-only column vs current settings, settled together. */
  compare(): void {
    if (this.state.selectedQueryId === null) return;
    const id = ++this.compareSeq;
    const imageOnly: SearchRequest = {
      query_image_id: this.state.selectedQueryId,
      k: this.state.k,
    };
    const wrap = (req: SearchRequest): Promise<ColumnOutcome> =>
      this.client.search(req).then(
        (response): ColumnOutcome => ({ ok: true, response }),
        (error): ColumnOutcome => ({ ok: false, error: error as ApiError }),
      );
    void Promise.all([wrap(imageOnly), wrap(buildRequest(this.state))]).then(
      ([left, right]) => {
        if (id !== this.compareSeq) return; // superseded panel
        this.events.onCompare(left, right);
      },
    );
  }

  private schedule(): void {
    if (this.state.selectedQueryId === null) return;
    this.cancelPending();
    this.timer = setTimeout(() => {
      this.timer = null;
      this.searchNow();
    }, DEBOUNCE_MS);
  }

  private cancelPending(): void {
    if (this.timer !== null) {
      clearTimeout(this.timer);
      this.timer = null;
    }
  }

  private settle(id: number, outcome: ColumnOutcome): void {
    if (id !== this.seq) return; // stale: a newer request owns the display
    this.state.inFlight = false;
    if (outcome.ok) {
      this.state.lastResponse = outcome.response;
      if (outcome.response.effective.used_text) {
        // the slider must show what the service actually used
        this.state.weight = outcome.response.effective.query_weight;
      }
      this.events.onState(this.state);
      this.events.onResponse(outcome.response);
    } else {
      this.events.onState(this.state);
      this.events.onError(outcome.error);
    }
  }
}
