"""HTTP service tests against a tiny corpus served by the real app.

One model + corpus + embedding export is built per module; every test
talks to the service through the ASGI test client, and search results
are cross-checked against the retrieval library directly.
"""

import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

import shopmatch.service as service
from shopmatch.errors import DataError, ValidationError
from shopmatch.retrieval import (EMBEDDING_FILES, build_index, export_embeddings,
                                 fuse_one, read_embedding_file, search,
                                 write_embedding_file)
from shopmatch.service import ServiceConfig, create_app, handle_search, load_service_state
from shopmatch.synthdata import CorpusConfig, generate_corpus, text_to_tokens, write_corpus
from shopmatch.towers import (TowerConfig, embed_texts, init_tower_params,
                              save_checkpoint)

# -----------------------------------------------------------------------------
# session artifacts
# -----------------------------------------------------------------------------

TOWER = TowerConfig(image_feature_dim=7, vocab_size=50, max_tokens=6,
                    hidden_dims=(8, 6), embed_dim=5)


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    root = tmp_path_factory.mktemp("svc")
    corpus = generate_corpus(CorpusConfig(
        n_products=40, n_queries_per_product=2, n_distractors=6,
        concept_dim=4, image_feature_dim=7, vocab_size=50, quant_levels=10,
        background_pool_size=3, n_filler_tokens=6, seed=13))
    write_corpus(corpus, root / "corpus")
    tp = init_tower_params(TOWER, np.random.default_rng(8), with_query_text=True)
    save_checkpoint(tp, root / "model.ckpt")
    export_embeddings(tp, corpus, root / "emb")
    return {"root": root, "corpus": corpus, "tp": tp}


def _config(artifacts, **overrides):
    root = artifacts["root"]
    base = dict(checkpoint=root / "model.ckpt", corpus_dir=root / "corpus",
                embeddings_dir=root / "emb", default_k=5)
    base.update(overrides)
    return ServiceConfig(**base)


@pytest.fixture(scope="module")
def state(artifacts):
    return load_service_state(_config(artifacts))


@pytest.fixture(scope="module")
def client(state):
    return TestClient(create_app(state))


@pytest.fixture(scope="module")
def eval_client(artifacts):
    return TestClient(create_app(load_service_state(
        _config(artifacts, evaluation_mode=True))))


def _error(response, status, code):
    assert response.status_code == status
    body = response.json()
    assert set(body) == {"error"}
    assert body["error"]["code"] == code
    return body["error"]["message"]


# -----------------------------------------------------------------------------
# startup
# -----------------------------------------------------------------------------


class TestStartup:
    def test_config_validation(self, artifacts):
        with pytest.raises(ValidationError, match="index_weight"):
            _config(artifacts, index_weight=1.5)
        with pytest.raises(ValidationError, match="default_query_weight"):
            _config(artifacts, default_query_weight=-0.1)
        with pytest.raises(ValidationError, match="default_k"):
            _config(artifacts, default_k=0)

    def test_state_covers_corpus(self, state, artifacts):
        corpus = artifacts["corpus"]
        assert state.index.size == 46  # 40 products + 6 distractors
        assert len(state.query_rows) == 80
        assert state.distractor_ids == set(range(40, 46))
        assert state.truth_by_query[0] == corpus.queries[0].product_id

    def test_missing_embedding_file(self, artifacts, tmp_path):
        hollow = tmp_path / "emb"
        hollow.mkdir()
        with pytest.raises(FileNotFoundError, match="catalog_image.emb"):
            load_service_state(_config(artifacts, embeddings_dir=hollow))

    def test_product_id_mismatch_is_rejected(self, artifacts, tmp_path):
        broken = tmp_path / "emb"
        broken.mkdir()
        src = artifacts["root"] / "emb"
        for name in EMBEDDING_FILES.values():
            (broken / name).write_bytes((src / name).read_bytes())
        ids, vecs = read_embedding_file(broken / "catalog_image.emb")
        write_embedding_file(broken / "catalog_image.emb", ids + 1000, vecs)
        with pytest.raises(DataError, match="disagree|cover"):
            load_service_state(_config(artifacts, embeddings_dir=broken))

    def test_query_id_mismatch_is_rejected(self, artifacts, tmp_path):
        broken = tmp_path / "emb"
        broken.mkdir()
        src = artifacts["root"] / "emb"
        for name in EMBEDDING_FILES.values():
            (broken / name).write_bytes((src / name).read_bytes())
        ids, vecs = read_embedding_file(broken / "query_image.emb")
        write_embedding_file(broken / "query_image.emb", ids[:-1], vecs[:-1])
        with pytest.raises(DataError, match="query"):
            load_service_state(_config(artifacts, embeddings_dir=broken))


# -----------------------------------------------------------------------------
# read endpoints
# -----------------------------------------------------------------------------


class TestReadEndpoints:
    def test_health(self, client):
        body = client.get("/health").json()
        assert body == {"status": "ok", "index_size": 46, "embed_dim": 5}

    def test_config(self, client, state):
        body = client.get("/config").json()
        assert body["index_weight"] == 0.5
        assert body["default_k"] == 5
        assert body["evaluation_mode"] is False
        assert body["has_query_text_head"] is True
        assert body["image_feature_dim"] == 7
        assert body["counts"] == {"products": 40, "distractors": 6, "queries": 80}
        assert body["temperature"] == pytest.approx(state.tp.temperature())

    def test_product_detail(self, client, artifacts):
        product = artifacts["corpus"].products[3]
        body = client.get("/products/3").json()
        assert body["product_id"] == 3
        assert body["is_distractor"] is False
        assert body["text_tokens"] == list(product.product_text_tokens)
        assert len(body["text_words"]) == len(product.product_text_tokens)
        summary = body["feature_summary"]
        assert summary["dim"] == 7
        assert summary["norm"] == pytest.approx(
            float(np.linalg.norm(product.catalog_image_features)))
        assert "query_ids" not in body  # evaluation-only field

    def test_distractor_is_flagged(self, client):
        assert client.get("/products/42").json()["is_distractor"] is True

    def test_unknown_product_is_404(self, client):
        message = _error(client.get("/products/99999"), 404, "not_found")
        assert "99999" in message

    def test_eval_mode_reveals_product_queries(self, eval_client, artifacts):
        body = eval_client.get("/products/3").json()
        corpus = artifacts["corpus"]
        expected = [q.query_id for q in corpus.queries if q.product_id == 3]
        assert body["query_ids"] == expected

    def test_queries_default_page(self, client):
        body = client.get("/queries").json()
        assert body["total"] == 80
        assert body["offset"] == 0 and body["limit"] == 24
        assert len(body["items"]) == 24
        first = body["items"][0]
        assert first["query_id"] == 0
        assert len(first["features"]) == 7
        assert "product_id" not in first  # truth hidden outside eval mode

    def test_queries_pagination(self, client):
        body = client.get("/queries", params={"offset": 76, "limit": 10}).json()
        assert [q["query_id"] for q in body["items"]] == [76, 77, 78, 79]
        beyond = client.get("/queries", params={"offset": 200, "limit": 10}).json()
        assert beyond["items"] == []

    def test_queries_limit_bounds(self, client):
        _error(client.get("/queries", params={"limit": 0}), 400, "validation_error")
        _error(client.get("/queries", params={"limit": 201}), 400, "validation_error")
        _error(client.get("/queries", params={"offset": -1}), 400, "validation_error")

    def test_queries_type_error_is_validation_error(self, client):
        _error(client.get("/queries", params={"limit": "many"}), 400, "validation_error")

    def test_eval_mode_reveals_query_truth(self, eval_client, artifacts):
        body = eval_client.get("/queries", params={"limit": 3}).json()
        truths = [q.product_id for q in artifacts["corpus"].queries[:3]]
        assert [item["product_id"] for item in body["items"]] == truths


# -----------------------------------------------------------------------------
# search
# -----------------------------------------------------------------------------


class TestSearch:
    def _oracle_index(self, artifacts, index_weight=0.5):
        emb_dir = artifacts["root"] / "emb"
        cat_ids, cat = read_embedding_file(emb_dir / "catalog_image.emb")
        _, text = read_embedding_file(emb_dir / "product_text.emb")
        return build_index(cat_ids, cat, text, index_weight)

    def _query_row(self, artifacts, qid):
        emb_dir = artifacts["root"] / "emb"
        qids, qvecs = read_embedding_file(emb_dir / "query_image.emb")
        return qvecs[int(np.flatnonzero(qids == qid)[0])]

    def test_image_only_search_matches_library(self, client, artifacts):
        index = self._oracle_index(artifacts)
        for qid in (0, 17, 79):
            body = client.post("/search", json={"query_image_id": qid, "k": 4}).json()
            expected = search(index, self._query_row(artifacts, qid), 4)
            assert [r["product_id"] for r in body["results"]] == \
                [h.product_id for h in expected]
            for got, hit in zip(body["results"], expected):
                assert got["score"] == pytest.approx(hit.score, abs=1e-6)
            assert [r["rank"] for r in body["results"]] == [1, 2, 3, 4]
            assert body["effective"] == {"query_weight": 1.0, "index_weight": 0.5,
                                         "k": 4, "used_text": False,
                                         "query_tokens": None}

    def test_text_search_matches_library(self, client, artifacts, state):
        text = "attr0_3 attr2_7"
        tokens = text_to_tokens(artifacts["corpus"].config, text)
        body = client.post("/search", json={
            "query_image_id": 5, "query_text": text, "query_weight": 0.3, "k": 3,
        }).json()
        assert body["effective"]["used_text"] is True
        assert body["effective"]["query_tokens"] == tokens
        assert body["effective"]["query_weight"] == 0.3

        text_emb = embed_texts(artifacts["tp"], [tokens], "query")[0]
        fused = fuse_one(self._query_row(artifacts, 5), text_emb, 0.3)
        expected = search(self._oracle_index(artifacts), fused, 3)
        assert [r["product_id"] for r in body["results"]] == \
            [h.product_id for h in expected]
        for got, hit in zip(body["results"], expected):
            assert got["score"] == pytest.approx(hit.score, abs=1e-6)

    def test_token_list_equals_text_form(self, client, artifacts):
        text = "attr1_4 fill2"
        tokens = text_to_tokens(artifacts["corpus"].config, text)
        a = client.post("/search", json={"query_image_id": 9, "query_text": text}).json()
        b = client.post("/search", json={"query_image_id": 9, "query_text": tokens}).json()
        assert a == b

    def test_inline_features_match_stored_query(self, client, artifacts):
        query = artifacts["corpus"].queries[12]
        features = [float(v) for v in query.query_image_features]
        by_id = client.post("/search", json={"query_image_id": 12, "k": 5}).json()
        inline = client.post("/search",
                             json={"query_image_features": features, "k": 5}).json()
        assert [r["product_id"] for r in inline["results"]] == \
            [r["product_id"] for r in by_id["results"]]
        for a, b in zip(inline["results"], by_id["results"]):
            assert a["score"] == pytest.approx(b["score"], abs=1e-6)

    def test_k_defaults_to_service_config(self, client):
        body = client.post("/search", json={"query_image_id": 0}).json()
        assert len(body["results"]) == 5
        assert body["effective"]["k"] == 5

    def test_full_image_weight_with_text_equals_no_text(self, client):
        plain = client.post("/search", json={"query_image_id": 3, "k": 4}).json()
        weighted = client.post("/search", json={
            "query_image_id": 3, "k": 4, "query_text": "attr0_1", "query_weight": 1.0,
        }).json()
        assert [r["product_id"] for r in weighted["results"]] == \
            [r["product_id"] for r in plain["results"]]
        assert [r["score"] for r in weighted["results"]] == \
            [r["score"] for r in plain["results"]]

    def test_empty_text_is_treated_as_absent(self, client):
        for empty in ("", "   ", []):
            body = client.post("/search", json={
                "query_image_id": 1, "query_text": empty,
            }).json()
            assert body["effective"]["used_text"] is False
            assert body["effective"]["query_weight"] == 1.0

    def test_unknown_words_still_count_as_text(self, client):
        body = client.post("/search", json={
            "query_image_id": 1, "query_text": "entirely mysterious words",
        }).json()
        assert body["effective"]["used_text"] is True
        assert body["effective"]["query_tokens"] == [1, 1, 1]  # all unk

    def test_distractors_are_flagged_in_results(self, client):
        body = client.post("/search", json={"query_image_id": 0, "k": 46}).json()
        flags = {r["product_id"]: r["is_distractor"] for r in body["results"]}
        assert flags[42] is True and flags[0] is False

    def test_responses_are_deterministic(self, client):
        req = {"query_image_id": 7, "query_text": "attr0_2", "query_weight": 0.4}
        a = client.post("/search", json=req)
        b = client.post("/search", json=req)
        assert a.content == b.content

    def test_eval_mode_reveals_ground_truth(self, eval_client, artifacts):
        truth = artifacts["corpus"].queries[30].product_id
        body = eval_client.post("/search", json={"query_image_id": 30}).json()
        assert body["ground_truth_product_id"] == truth

    def test_eval_mode_inline_features_have_no_truth(self, eval_client, artifacts):
        features = [float(v) for v in artifacts["corpus"].queries[0].query_image_features]
        body = eval_client.post("/search",
                                json={"query_image_features": features}).json()
        assert body["ground_truth_product_id"] is None

    def test_plain_mode_hides_ground_truth(self, client):
        body = client.post("/search", json={"query_image_id": 30}).json()
        assert "ground_truth_product_id" not in body


class TestSearchValidation:
    def test_image_source_is_required_exactly_once(self, client):
        message = _error(client.post("/search", json={}), 400, "validation_error")
        assert "exactly one" in message
        _error(client.post("/search", json={
            "query_image_id": 0,
            "query_image_features": [0.0] * 7,
        }), 400, "validation_error")

    def test_unknown_query_id(self, client):
        message = _error(client.post("/search", json={"query_image_id": 4040}),
                         404, "not_found")
        assert "4040" in message

    def test_unknown_fields_are_named(self, client):
        message = _error(client.post("/search", json={
            "query_image_id": 0, "text": "x", "weights": 1,
        }), 400, "validation_error")
        assert "text" in message and "weights" in message

    def test_wrong_feature_length(self, client):
        message = _error(client.post("/search", json={
            "query_image_features": [0.1, 0.2],
        }), 400, "validation_error")
        assert "expected 7" in message

    def test_non_numeric_features(self, client):
        _error(client.post("/search", json={
            "query_image_features": ["a"] * 7,
        }), 400, "validation_error")
        _error(client.post("/search", json={
            "query_image_features": [True] + [0.0] * 6,
        }), 400, "validation_error")

    def test_non_finite_features(self, client):
        # raw body: 1e999 parses to inf under Python's json
        raw = json.dumps({"query_image_features": [0.1] * 6 + [0]})
        raw = raw.replace("0.1", "1e999")
        response = client.post("/search", content=raw,
                               headers={"content-type": "application/json"})
        message = _error(response, 400, "validation_error")
        assert "finite" in message

    def test_bad_k(self, client):
        _error(client.post("/search", json={"query_image_id": 0, "k": 0}),
               400, "validation_error")
        _error(client.post("/search", json={"query_image_id": 0, "k": True}),
               400, "validation_error")
        _error(client.post("/search", json={"query_image_id": 0, "k": "many"}),
               400, "validation_error")

    def test_bad_query_weight(self, client):
        body = {"query_image_id": 0, "query_text": "attr0_1"}
        _error(client.post("/search", json={**body, "query_weight": 1.5}),
               400, "validation_error")
        _error(client.post("/search", json={**body, "query_weight": "heavy"}),
               400, "validation_error")

    def test_bad_text_token(self, client):
        message = _error(client.post("/search", json={
            "query_image_id": 0, "query_text": [2, 50],
        }), 400, "validation_error")
        assert "position 1" in message
        _error(client.post("/search", json={
            "query_image_id": 0, "query_text": [-1],
        }), 400, "validation_error")
        _error(client.post("/search", json={
            "query_image_id": 0, "query_text": 42,
        }), 400, "validation_error")

    def test_malformed_json_is_parse_error(self, client):
        response = client.post("/search", content=b"{nope",
                               headers={"content-type": "application/json"})
        _error(response, 400, "parse_error")

    def test_non_object_body_is_rejected(self, client):
        response = client.post("/search", json=[1, 2, 3])
        message = _error(response, 400, "validation_error")
        assert "JSON object" in message

    def test_cancelling_fusion_is_reported(self, state, monkeypatch):
        # force the text embedding to be the exact opposite of the image
        row = state.query_image[4]

        def opposite(tp, rows, role):
            return -row[None, :]

        monkeypatch.setattr(service, "embed_texts", opposite)
        with pytest.raises(service.ServiceError) as err:
            handle_search(state, {"query_image_id": 4, "query_text": "attr0_1",
                                  "query_weight": 0.5})
        assert err.value.code == "degenerate_fusion"
        assert err.value.status == 400
