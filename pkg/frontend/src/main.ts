import { ApiError, createClient } from "./api.js";
import {
  clearBanner,
  displayedOrder,
  errorTarget,
  galleryPageLabel,
  renderBanner,
  renderCompare,
  renderGallery,
  renderResults,
} from "./render.js";
import { SearchController, snapWeight } from "./state.js";
import type { ConfigInfo, QueriesPage } from "./types.js";

const PAGE_SIZE = 24;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function serviceUrl(): string {
  const fromQuery = new URLSearchParams(location.search).get("service");
  return fromQuery ?? "http://127.0.0.1:8080";
}

function setFieldError(target: ReturnType<typeof errorTarget>, message: string): void {
  for (const name of ["text", "weight", "k", "general"] as const) {
    const node = el(`error-${name}`);
    node.textContent = name === target ? message : "";
  }
}

async function boot(): Promise<void> {
  const client = createClient(serviceUrl());
  const banner = el("banner");
  const gallery = el("gallery");
  const results = el("results");
  const compare = el("compare");
  const pageLabel = el("page-label");
  const slider = el<HTMLInputElement>("weight");
  const sliderLabel = el("weight-label");
  const textInput = el<HTMLInputElement>("text");
  const kInput = el<HTMLInputElement>("k");

  let config: ConfigInfo;
  let page: QueriesPage;
  let offset = 0;

  const controller = new SearchController(client, {
    onState(state) {
      slider.value = String(state.weight);
      sliderLabel.textContent = state.weight.toFixed(2);
      slider.disabled = state.text.trim() === "";
      el("status").textContent = state.inFlight ? "searching…" : "";
    },
    onResponse(response) {
      setFieldError("general", "");
      renderResults(results, response);
    },
    onError(error) {
      setFieldError(errorTarget(error), error.message);
      if (error.code === "unreachable") {
        renderBanner(banner, "service unreachable", () => void loadGallery());
      }
    },
    onCompare(left, right) {
      renderCompare(compare, left, right);
    },
  });

  async function loadGallery(): Promise<void> {
    try {
      page = await client.queries(offset, PAGE_SIZE);
      clearBanner(banner);
      renderGallery(gallery, page, controller.state.selectedQueryId, (id) => {
        renderGallery(gallery, page, id, () => undefined);
        controller.selectQuery(id);
      });
      pageLabel.textContent = galleryPageLabel(page);
    } catch (err) {
      const message = err instanceof ApiError ? err.message : String(err);
      renderBanner(banner, `cannot load gallery: ${message}`, () => void loadGallery());
    }
  }

  try {
    config = await client.config();
  } catch (err) {
    const message = err instanceof ApiError ? err.message : String(err);
    renderBanner(banner, `cannot reach service: ${message}`, () => void boot());
    return;
  }

  controller.state.k = config.default_k;
  controller.state.weight = snapWeight(config.default_query_weight);
  kInput.value = String(config.default_k);
  el("mode-label").textContent = config.evaluation_mode
    ? "evaluation mode: ground truth shown"
    : "";

  slider.addEventListener("input", () => controller.setWeight(Number(slider.value)));
  textInput.addEventListener("input", () => controller.setText(textInput.value));
  kInput.addEventListener("change", () => controller.setK(Number(kInput.value)));
  el("search-button").addEventListener("click", () => controller.searchNow());
  el("compare-button").addEventListener("click", () => controller.compare());
  el("prev").addEventListener("click", () => {
    offset = Math.max(0, offset - PAGE_SIZE);
    void loadGallery();
  });
  el("next").addEventListener("click", () => {
    if (offset + PAGE_SIZE < page.total) offset += PAGE_SIZE;
    void loadGallery();
  });

  await loadGallery();
}

declare global {
  interface Window {
    shopmatchConsole: { displayedOrder: typeof displayedOrder };
  }
}
// handle for end-to-end assertions against the rendered DOM
window.shopmatchConsole = { displayedOrder };

void boot();
