/** Wire types for the search service. Mirrors docs/service_api.md. */

export interface SearchRequest {
  query_image_id?: number;
  query_image_features?: number[];
  query_text?: string | number[];
  query_weight?: number;
  k?: number;
}

export interface SearchResult {
  rank: number;
  product_id: number;
  score: number;
  is_distractor: boolean;
  text_words: string[];
}

export interface SearchResponse {
  results: SearchResult[];
  effective: {
    query_weight: number;
    index_weight: number;
    k: number;
    used_text: boolean;
    query_tokens: number[] | null;
  };
  ground_truth_product_id?: number | null;
}

export interface ConfigInfo {
  index_weight: number;
  default_query_weight: number;
  default_k: number;
  evaluation_mode: boolean;
  embed_dim: number;
  image_feature_dim: number;
  vocab_size: number;
  temperature: number;
  has_query_text_head: boolean;
  counts: { products: number; distractors: number; queries: number };
}

export interface QueryItem {
  query_id: number;
  features: number[];
  text_tokens: number[];
  product_id?: number;
}

export interface QueriesPage {
  total: number;
  offset: number;
  limit: number;
  items: QueryItem[];
}

export interface HealthInfo {
  status: string;
  index_size: number;
  embed_dim: number;
}

/** Error envelope every non-2xx response carries. */
export interface ErrorBody {
  error: { code: string; message: string };
}
