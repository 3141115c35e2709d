import type { ApiError } from "./api.js";
import type { ColumnOutcome } from "./state.js";
import { renderSwatch } from "./swatch.js";
import type { QueriesPage, QueryItem, SearchResponse, SearchResult } from "./types.js";

/**
 * DOM rendering. Every list is rendered strictly in the order the
 * service returned it — the console never sorts, filters, or rescores.
 */

function clear(el: HTMLElement): void {
  while (el.firstChild) el.removeChild(el.firstChild);
}

export function renderGallery(
  container: HTMLElement,
  page: QueriesPage,
  selectedId: number | null,
  onSelect: (queryId: number) => void,
): void {
  const doc = container.ownerDocument;
  clear(container);
  for (const item of page.items) {
    const button = doc.createElement("button");
    button.type = "button";
    button.className = "query-tile" + (item.query_id === selectedId ? " selected" : "");
    button.dataset["queryId"] = String(item.query_id);
    button.innerHTML = renderSwatch(item.features);
    const label = doc.createElement("span");
    label.className = "tile-label";
    label.textContent = `q${item.query_id}`;
    button.appendChild(label);
    if (item.product_id !== undefined) {
      button.title = `ground truth: product ${item.product_id}`;
    }
    button.addEventListener("click", () => onSelect(item.query_id));
    container.appendChild(button);
  }
}

export function galleryPageLabel(page: QueriesPage): string {
  if (page.total === 0) return "no queries";
  const last = Math.min(page.offset + page.items.length, page.total);
  return `${page.offset + 1}–${last} of ${page.total}`;
}

function resultRow(doc: Document, result: SearchResult, truthId: number | null): HTMLElement {
  const li = doc.createElement("li");
  li.className = "result";
  if (truthId !== null && result.product_id === truthId) li.className += " truth";
  li.dataset["productId"] = String(result.product_id);

  const rank = doc.createElement("span");
  rank.className = "rank";
  rank.textContent = `#${result.rank}`;
  const id = doc.createElement("span");
  id.className = "product-id";
  id.textContent = `product ${result.product_id}`;
  const score = doc.createElement("span");
  score.className = "score";
  score.textContent = result.score.toFixed(4);
  const words = doc.createElement("span");
  words.className = "words";
  words.textContent = result.text_words.join(" ");

  li.append(rank, id, score, words);
  if (result.is_distractor) {
    const badge = doc.createElement("span");
    badge.className = "distractor";
    badge.textContent = "distractor";
    li.appendChild(badge);
  }
  return li;
}

export function renderResults(container: HTMLElement, response: SearchResponse | null): void {
  const doc = container.ownerDocument;
  clear(container);
  if (response === null) return;
  const truthId = response.ground_truth_product_id ?? null;
  const list = doc.createElement("ol");
  list.className = "results";
  for (const result of response.results) {
    list.appendChild(resultRow(doc, result, truthId));
  }
  container.appendChild(list);
  const effective = doc.createElement("div");
  effective.className = "effective";
  effective.textContent =
    `w_q ${response.effective.query_weight} · ` +
    `w_index ${response.effective.index_weight} · k ${response.effective.k}` +
    (response.effective.used_text
      ? ` · tokens [${(response.effective.query_tokens ?? []).join(", ")}]`
      : " · image only");
  container.appendChild(effective);
}

/** Product ids in display order — what the e2e test compares to the wire. */
export function displayedOrder(container: HTMLElement): number[] {
  const rows = container.querySelectorAll<HTMLElement>("li.result");
  return Array.from(rows, (row) => Number(row.dataset["productId"]));
}

function truthRankLine(doc: Document, outcome: ColumnOutcome): HTMLElement | null {
  if (!outcome.ok) return null;
  const truth = outcome.response.ground_truth_product_id;
  if (truth === undefined || truth === null) return null;
  const hit = outcome.response.results.find((r) => r.product_id === truth);
  const line = doc.createElement("div");
  line.className = "truth-rank";
  line.textContent = hit ? `truth at rank ${hit.rank}` : "truth not in top k";
  return line;
}

function compareColumn(
  doc: Document,
  title: string,
  outcome: ColumnOutcome,
  shared: Set<number>,
): HTMLElement {
  const column = doc.createElement("div");
  column.className = "compare-column";
  const heading = doc.createElement("h3");
  heading.textContent = title;
  column.appendChild(heading);
  if (!outcome.ok) {
    const err = doc.createElement("div");
    err.className = "column-error";
    err.textContent = `${outcome.error.code}: ${outcome.error.message}`;
    column.appendChild(err);
    return column;
  }
  const truthId = outcome.response.ground_truth_product_id ?? null;
  const list = doc.createElement("ol");
  list.className = "results";
  for (const result of outcome.response.results) {
    const row = resultRow(doc, result, truthId);
    if (shared.has(result.product_id)) row.className += " shared";
    list.appendChild(row);
  }
  column.appendChild(list);
  const rankLine = truthRankLine(doc, outcome);
  if (rankLine) column.appendChild(rankLine);
  return column;
}

export function renderCompare(
  container: HTMLElement,
  left: ColumnOutcome,
  right: ColumnOutcome,
): void {
  const doc = container.ownerDocument;
  clear(container);
  const ids = (o: ColumnOutcome) =>
    o.ok ? o.response.results.map((r) => r.product_id) : [];
  const leftIds = new Set(ids(left));
  const shared = new Set(ids(right).filter((id) => leftIds.has(id)));
  container.appendChild(compareColumn(doc, "image only (w_q = 1)", left, shared));
  container.appendChild(compareColumn(doc, "fused (current settings)", right, shared));
}

export function renderBanner(
  container: HTMLElement,
  message: string,
  onRetry: () => void,
): void {
  const doc = container.ownerDocument;
  clear(container);
  container.className = "banner error";
  const text = doc.createElement("span");
  text.textContent = message;
  const retry = doc.createElement("button");
  retry.type = "button";
  retry.textContent = "retry";
  retry.addEventListener("click", onRetry);
  container.append(text, retry);
}

export function clearBanner(container: HTMLElement): void {
  clear(container);
  container.className = "banner";
}

export type ErrorTarget = "text" | "weight" | "k" | "general";

/** Route a service validation message to the control it talks about. */
export function errorTarget(error: ApiError): ErrorTarget {
  if (error.code !== "validation_error" && error.code !== "degenerate_fusion") {
    return "general";
  }
  const m = error.message;
  if (m.includes("query_weight") || error.code === "degenerate_fusion") return "weight";
  if (m.includes("query_text") || m.includes("token")) return "text";
  if (m.startsWith("k ") || m.includes(" k ")) return "k";
  return "general";
}
