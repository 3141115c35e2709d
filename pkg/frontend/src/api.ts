import type {
  ConfigInfo,
  ErrorBody,
  HealthInfo,
  QueriesPage,
  SearchRequest,
  SearchResponse,
} from "./types.js";

/** A non-2xx service response, carrying the service's error code. */
export class ApiError extends Error {
  readonly code: string;
  readonly status: number;

  constructor(code: string, message: string, status: number) {
    super(message);
    this.name = "ApiError";
    this.code = code;
    this.status = status;
  }
}

function isErrorBody(v: unknown): v is ErrorBody {
  if (typeof v !== "object" || v === null) return false;
  const e = (v as { error?: unknown }).error;
  return (
    typeof e === "object" &&
    e !== null &&
    typeof (e as { code?: unknown }).code === "string" &&
    typeof (e as { message?: unknown }).message === "string"
  );
}

export interface Client {
  health(): Promise<HealthInfo>;
  config(): Promise<ConfigInfo>;
  queries(offset: number, limit: number): Promise<QueriesPage>;
  search(request: SearchRequest): Promise<SearchResponse>;
}

export interface ClientOptions {
  fetchImpl?: typeof fetch;
}

/**
 * Typed client for the search service. All failures surface as ApiError:
 * service-shaped errors keep their code, transport failures get code
 * "unreachable", and malformed bodies get "bad_response".
 */
export function createClient(baseUrl: string, options: ClientOptions = {}): Client {
  const base = baseUrl.replace(/\/+$/, "");
  const fetchImpl = options.fetchImpl ?? fetch;

  async function request<T>(path: string, init?: RequestInit): Promise<T> {
    let response: Response;
    try {
      response = await fetchImpl(base + path, init);
    } catch (err) {
      throw new ApiError("unreachable", `service unreachable: ${String(err)}`, 0);
    }
    let body: unknown;
    try {
      body = await response.json();
    } catch {
      throw new ApiError("bad_response", `non-JSON response (${response.status})`, response.status);
    }
    if (!response.ok) {
      if (isErrorBody(body)) {
        throw new ApiError(body.error.code, body.error.message, response.status);
      }
      throw new ApiError("bad_response", `status ${response.status}`, response.status);
    }
    return body as T;
  }

  return {
    health: () => request<HealthInfo>("/health"),
    config: () => request<ConfigInfo>("/config"),
    queries: (offset, limit) =>
      request<QueriesPage>(`/queries?offset=${offset}&limit=${limit}`),
    search: (req) =>
      request<SearchResponse>("/search", {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(req),
      }),
  };
}
