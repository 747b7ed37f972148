"""HTTP service for candidate review, curation decisions, and previews.

Stdlib threading server exposing the /api/v1 surface. Decision writes are
serialized through a single lock, preview sampling runs on a bounded worker
pool over immutable checkpoints, and finalize returns 409 while previews
are in flight. Optionally serves a static UI bundle at /.
"""

from __future__ import annotations

import hashlib
import json
import mimetypes
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np

from . import synthdata
from .adjust import AdjustmentSpec, InferenceRequest, personalized_sample
from .augment import (CurationDecision, append_decision, finalize_sets,
                      load_decisions, load_pool)
from .errors import ShortfallError, StageError, UvapError
from .pipeline import Run, stage_rank

PAGE_SIZE = 24
PREVIEW_WORKERS = 2


class ServiceState:
    """Shared state: locks, checkpoint cache, preview accounting."""

    def __init__(self, root: Path, ui_dir: Path | None):
        self.root = Path(root)
        self.ui_dir = Path(ui_dir) if ui_dir else None
        self.decision_lock = threading.Lock()
        self.preview_sem = threading.Semaphore(PREVIEW_WORKERS)
        self.active_previews = 0
        self.counter_lock = threading.Lock()
        self._ckpt_cache: dict[str, tuple[float, object]] = {}

    def run(self, run_id: str) -> Run:
        r = Run(self.root, run_id)
        if not r.exists():
            raise KeyError(run_id)
        return r

    def list_runs(self) -> list[dict]:
        out = []
        if self.root.exists():
            for p in sorted(self.root.iterdir()):
                r = Run(self.root, p.name)
                if r.exists():
                    out.append({"id": p.name, "stage": r.effective_stage()})
        return out

    def best_checkpoint(self, run: Run):
        name = "dual" if stage_rank(run.effective_stage()) >= stage_rank("dual_trained") else "g0"
        path = run.dir / "checkpoints" / f"{name}.uvap"
        mtime = path.stat().st_mtime
        cached = self._ckpt_cache.get(str(path))
        if cached is None or cached[0] != mtime:
            self._ckpt_cache[str(path)] = (mtime, run.checkpoint(name))
        return self._ckpt_cache[str(path)][1]

    def begin_preview(self):
        with self.counter_lock:
            self.active_previews += 1

    def end_preview(self):
        with self.counter_lock:
            self.active_previews -= 1

    def previews_active(self) -> bool:
        with self.counter_lock:
            return self.active_previews > 0


class ApiHandler(BaseHTTPRequestHandler):
    state: ServiceState  # injected by make_server

    # -- plumbing -----------------------------------------------------------
    def log_message(self, fmt, *args):
        pass

    def _send(self, code: int, payload, content_type="application/json"):
        body = payload if isinstance(payload, (bytes, bytearray)) else \
            json.dumps(payload).encode()
        self.send_response(code)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.end_headers()
        self.wfile.write(body)

    def _json_body(self) -> dict:
        length = int(self.headers.get("Content-Length", 0))
        return json.loads(self.rfile.read(length).decode() or "{}")

    def do_OPTIONS(self):
        self._send(204, b"")

    # -- routing --------------------------------------------------------------
    def do_GET(self):
        try:
            self._route_get()
        except KeyError as e:
            self._send(404, {"error": f"unknown run: {e}"})
        except FileNotFoundError as e:
            self._send(404, {"error": str(e)})
        except Exception as e:  # noqa: BLE001
            self._send(500, {"error": f"{type(e).__name__}: {e}"})

    def do_POST(self):
        try:
            self._route_post()
        except KeyError as e:
            self._send(404, {"error": f"unknown run: {e}"})
        except ShortfallError as e:
            self._send(409, {"error": str(e)})
        except (UvapError, ValueError) as e:
            self._send(400, {"error": str(e)})
        except Exception as e:  # noqa: BLE001
            self._send(500, {"error": f"{type(e).__name__}: {e}"})

    def _route_get(self):
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]

        if parts[:3] == ["api", "v1", "runs"]:
            if len(parts) == 3:
                return self._send(200, self.state.list_runs())
            run = self.state.run(parts[3])
            rest = parts[4:]
            if rest == ["candidates"]:
                return self._candidates(run, parse_qs(url.query))
            if len(rest) == 2 and rest[0] == "images":
                return self._image(run, rest[1])
            if rest[:1] == ["previews"]:
                return self._preview_file(run, rest[1:])
            if rest == ["reports", "latest"]:
                path = run.dir / "reports" / "latest.json"
                if not path.exists():
                    return self._send(404, {"error": "no reports yet"})
                return self._send(200, path.read_bytes())
            return self._send(404, {"error": "unknown endpoint"})
        return self._static(url.path)

    def _route_post(self):
        parts = [p for p in self.path.split("?")[0].split("/") if p]
        if parts[:3] != ["api", "v1", "runs"] or len(parts) < 5:
            return self._send(404, {"error": "unknown endpoint"})
        run = self.state.run(parts[3])
        action = parts[4]
        body = self._json_body()
        if action == "decisions":
            return self._decide(run, body)
        if action == "finalize":
            return self._finalize(run, body)
        if action == "preview":
            return self._preview(run, body)
        return self._send(404, {"error": "unknown endpoint"})

    # -- endpoints ------------------------------------------------------------
    def _candidates(self, run: Run, query: dict):
        set_tag = query.get("set", ["plus"])[0]
        page = int(query.get("page", ["0"])[0])
        pool = load_pool(run.dir / "candidates" / "pool.jsonl")
        decisions = load_decisions(run.decisions_path)
        eff = {}
        for d in decisions:
            eff[d.candidate_id] = d.decision
        members = [c for c in pool if c.set == set_tag and c.auto_kept]
        members.sort(key=lambda c: (-c.similarity, c.id))
        items = [{
            "id": c.id, "prompt": c.prompt, "seed": c.seed,
            "score": c.similarity, "auto_kept": c.auto_kept,
            "human_decision": eff.get(c.id, "undecided"),
            "image_url": f"/api/v1/runs/{run.run_id}/images/{c.id}.png",
        } for c in members[page * PAGE_SIZE:(page + 1) * PAGE_SIZE]]
        self._send(200, {"total": len(members), "page": page,
                         "page_size": PAGE_SIZE, "items": items})

    def _image(self, run: Run, name: str):
        cid = int(name.removesuffix(".png"))
        path = run.dir / "candidates" / f"{cid:04d}.png"
        if not path.exists():
            return self._send(404, {"error": f"no candidate image {cid}"})
        self._send(200, path.read_bytes(), content_type="image/png")

    def _preview_file(self, run: Run, rest: list[str]):
        path = run.dir / "previews"
        for part in rest:
            if part in ("..", ""):
                return self._send(404, {"error": "bad path"})
            path = path / part
        if not path.exists():
            return self._send(404, {"error": "no such preview"})
        self._send(200, path.read_bytes(), content_type="image/png")

    def _decide(self, run: Run, body: dict):
        cid = body.get("candidate_id")
        decision = body.get("decision")
        if decision not in ("keep", "reject"):
            return self._send(400, {"error": f"bad decision: {decision!r}"})
        pool = load_pool(run.dir / "candidates" / "pool.jsonl")
        match = [c for c in pool if c.id == cid]
        if not match:
            return self._send(404, {"error": f"unknown candidate: {cid}"})
        if not match[0].auto_kept:
            return self._send(400, {"error": f"candidate {cid} is not auto-kept"})
        with self.state.decision_lock:
            append_decision(run.decisions_path, CurationDecision(
                candidate_id=cid, decision=decision, timestamp=time.time(),
                operator=body.get("operator", "ui")))
        self._send(200, {"ok": True})

    def _finalize(self, run: Run, body: dict):
        if self.state.previews_active():
            return self._send(409, {"error": "preview sampling in progress"})
        m = int(body.get("m", 0))
        config = run.config()
        pool = load_pool(run.dir / "candidates" / "pool.jsonl")
        decisions = load_decisions(run.decisions_path)
        d_plus, d_minus = finalize_sets(pool, decisions, m, run.query(config))
        for cur in (d_plus, d_minus):
            payload = {"tag": cur.tag, "captions": cur.captions,
                       "image_paths": cur.image_paths, "m": cur.m}
            (run.dir / "curated").mkdir(parents=True, exist_ok=True)
            (run.dir / "curated" / f"{cur.tag}.json").write_text(
                json.dumps(payload, sort_keys=True, indent=2))
        run.mark_stage("curated", config, plus="curated/plus.json",
                       minus="curated/minus.json")
        self._send(200, {"plus_count": len(d_plus.captions),
                         "minus_count": len(d_minus.captions)})

    def _preview(self, run: Run, body: dict):
        prompt = body.get("prompt", "")
        lam = float(body.get("lambda", 0.3))
        seed = int(body.get("seed", 0))
        count = int(body.get("count", 1))
        config = run.config()
        ckpt = self.state.best_checkpoint(run)
        req = InferenceRequest(prompt=prompt, specs=[AdjustmentSpec(lam=lam)],
                               steps=config.inference.steps,
                               guidance=config.inference.guidance,
                               seed=seed, count=count)
        key = hashlib.sha256(json.dumps(req.to_json(), sort_keys=True).encode()
                             ).hexdigest()[:12]
        out_dir = run.dir / "previews" / key
        urls = [f"/api/v1/runs/{run.run_id}/previews/{key}/{i:03d}.png"
                for i in range(count)]
        if not out_dir.exists():
            self.state.begin_preview()
            try:
                with self.state.preview_sem:
                    images = personalized_sample(req, ckpt)
                for i, img in enumerate(images):
                    synthdata.save_image(img, out_dir / f"{i:03d}.png")
            finally:
                self.state.end_preview()
        self._send(200, {"images": urls, "lambda": lam, "seed": seed})

    # -- static UI ------------------------------------------------------------
    def _static(self, path: str):
        if self.state.ui_dir is None:
            return self._send(404, {"error": "no UI bundle configured"})
        rel = path.lstrip("/") or "index.html"
        target = (self.state.ui_dir / rel).resolve()
        if not str(target).startswith(str(self.state.ui_dir.resolve())) \
                or not target.is_file():
            target = self.state.ui_dir / "index.html"
            if not target.is_file():
                return self._send(404, {"error": "not found"})
        ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
        self._send(200, target.read_bytes(), content_type=ctype)


def make_server(root: str | Path, host: str = "127.0.0.1", port: int = 0,
                ui_dir: str | Path | None = None) -> ThreadingHTTPServer:
    state = ServiceState(Path(root), Path(ui_dir) if ui_dir else None)
    handler = type("BoundHandler", (ApiHandler,), {"state": state})
    return ThreadingHTTPServer((host, port), handler)


def serve(root: str | Path, bind: str, ui_dir: str | Path | None = None) -> None:
    host, _, port = bind.partition(":")
    server = make_server(root, host or "127.0.0.1", int(port or "8787"), ui_dir)
    print(f"serving on http://{server.server_address[0]}:{server.server_address[1]}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
