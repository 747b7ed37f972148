"""HTTP service: projections, decisions, finalize, previews, errors."""

import json
import threading
import urllib.error
import urllib.request

import pytest

from uvap.augment import load_decisions
from uvap.server import make_server


@pytest.fixture(scope="module")
def service(tiny_run):
    srv = make_server(tiny_run.dir.parent, port=0)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    base = f"http://127.0.0.1:{srv.server_address[1]}"
    yield base, tiny_run
    srv.shutdown()


def _get(base, path):
    with urllib.request.urlopen(base + path) as r:
        ctype = r.headers.get("Content-Type", "")
        data = r.read()
    return json.loads(data) if "json" in ctype else data


def _post(base, path, body):
    req = urllib.request.Request(base + path, data=json.dumps(body).encode(),
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req) as r:
            return r.status, json.loads(r.read())
    except urllib.error.HTTPError as e:
        return e.code, json.loads(e.read())


def test_list_runs(service):
    base, run = service
    runs = _get(base, "/api/v1/runs")
    assert {"id": run.run_id, "stage": run.effective_stage()} in runs


def test_candidates_projection_is_auto_kept_sorted(service):
    base, run = service
    payload = _get(base, "/api/v1/runs/tiny/candidates?set=plus&page=0")
    items = payload["items"]
    assert payload["total"] >= len(items) > 0
    scores = [i["score"] for i in items]
    assert scores == sorted(scores, reverse=True)
    from uvap.augment import load_pool
    pool = load_pool(run.dir / "candidates" / "pool.jsonl")
    kept = {c.id for c in pool if c.set == "plus" and c.auto_kept}
    assert {i["id"] for i in items} <= kept
    assert payload["total"] == len(kept)


def test_candidate_image_served(service):
    base, _ = service
    items = _get(base, "/api/v1/runs/tiny/candidates?set=plus&page=0")["items"]
    png = _get(base, items[0]["image_url"])
    assert png[:8] == b"\x89PNG\r\n\x1a\n"


def test_decision_roundtrip(service):
    base, run = service
    items = _get(base, "/api/v1/runs/tiny/candidates?set=minus&page=0")["items"]
    cid = items[0]["id"]
    status, resp = _post(base, "/api/v1/runs/tiny/decisions",
                         {"candidate_id": cid, "decision": "keep"})
    assert (status, resp) == (200, {"ok": True})
    after = _get(base, "/api/v1/runs/tiny/candidates?set=minus&page=0")["items"]
    assert next(i for i in after if i["id"] == cid)["human_decision"] == "keep"
    # Appended, never rewritten; last decision wins.
    status, _ = _post(base, "/api/v1/runs/tiny/decisions",
                      {"candidate_id": cid, "decision": "reject"})
    decisions = load_decisions(run.decisions_path)
    mine = [d for d in decisions if d.candidate_id == cid]
    assert len(mine) >= 2
    assert mine[-1].decision == "reject"


def test_decision_validation(service):
    base, _ = service
    assert _post(base, "/api/v1/runs/tiny/decisions",
                 {"candidate_id": 999999, "decision": "keep"})[0] == 404
    items = _get(base, "/api/v1/runs/tiny/candidates?set=plus&page=0")["items"]
    assert _post(base, "/api/v1/runs/tiny/decisions",
                 {"candidate_id": items[0]["id"], "decision": "maybe"})[0] == 400


def test_finalize_counts(service):
    base, _ = service
    status, resp = _post(base, "/api/v1/runs/tiny/finalize", {"m": 4})
    assert status == 200
    assert resp == {"plus_count": 4, "minus_count": 4}


def test_finalize_shortfall_409(service):
    base, _ = service
    status, resp = _post(base, "/api/v1/runs/tiny/finalize", {"m": 999})
    assert status == 409
    assert "short" in resp["error"]


def test_finalize_blocked_during_preview(service):
    # Mark a preview as in flight through the shared counter, then observe
    # the finalize endpoint refuse with 409.
    base, _ = service
    srv_state = _find_service_state()
    srv_state.begin_preview()
    try:
        status, resp = _post(base, "/api/v1/runs/tiny/finalize", {"m": 4})
        assert status == 409
        assert "preview" in resp["error"]
    finally:
        srv_state.end_preview()


def _find_service_state():
    import gc
    from uvap.server import ServiceState
    for obj in gc.get_objects():
        if isinstance(obj, ServiceState):
            return obj
    raise AssertionError("service state not found")


def test_preview_lambda_zero_equals_literal_tgt_bytes(service):
    base, _ = service
    s1, p1 = _post(base, "/api/v1/runs/tiny/preview",
                   {"prompt": "a photo of a sks color circle", "lambda": 0.0,
                    "seed": 21, "count": 2})
    s2, p2 = _post(base, "/api/v1/runs/tiny/preview",
                   {"prompt": "a photo of a tgt color circle", "lambda": 0.0,
                    "seed": 21, "count": 2})
    assert s1 == s2 == 200
    imgs1 = [_get(base, u) for u in p1["images"]]
    imgs2 = [_get(base, u) for u in p2["images"]]
    assert imgs1 == imgs2


def test_preview_served_at_reported_urls(service):
    base, _ = service
    _, p = _post(base, "/api/v1/runs/tiny/preview",
                 {"prompt": "a photo of a sks color square", "lambda": 0.3,
                  "seed": 5, "count": 1})
    png = _get(base, p["images"][0])
    assert png[:8] == b"\x89PNG\r\n\x1a\n"


def test_reports_latest(service):
    base, _ = service
    reports = _get(base, "/api/v1/runs/tiny/reports/latest")
    assert isinstance(reports, list) and reports
    assert {"target_accuracy", "leakage_rate", "diversity"} <= set(reports[0])


def test_unknown_run_404(service):
    base, _ = service
    assert _post(base, "/api/v1/runs/nope/decisions",
                 {"candidate_id": 0, "decision": "keep"})[0] == 404
    with pytest.raises(urllib.error.HTTPError) as e:
        _get(base, "/api/v1/runs/nope/candidates")
    assert e.value.code == 404
