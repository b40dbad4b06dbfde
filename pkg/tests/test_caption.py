import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from partlayout.caption import CaptionRequest, caption_request, mock_caption
from partlayout.cli import main
from partlayout.config import CaptionConfig
from partlayout.errors import CaptionUnavailableError
from partlayout.obb import Obb
from partlayout.primitives import box_mesh
from partlayout.segmentation import ShapeRecord, load_record, save_record


class Service:
    """Local HTTP stand-in that replays a list of (status, body) responses."""

    def __init__(self, responses):
        self.responses = list(responses)
        self.requests = []
        svc = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                svc.requests.append(json.loads(self.rfile.read(int(self.headers["Content-Length"]))))
                status, body = svc.responses.pop(0) if len(svc.responses) > 1 else svc.responses[0]
                data = json.dumps(body).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = HTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_port}/caption"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def views(tmp_path):
    paths = []
    for i in range(4):
        p = tmp_path / f"view_{i}.png"
        p.write_bytes(bytes([i]) * 16)
        paths.append(p)
    return paths


@pytest.fixture
def record(tmp_path):
    rec = ShapeRecord([box_mesh((0, 0, 0), (0.2, 0.2, 0.2), name="part_000")],
                      [Obb.axis_aligned([0, 0, 0], [0.2] * 3)], None, {"part_count": 1}, {})
    save_record(rec, tmp_path / "rec")
    return tmp_path / "rec" / "record.json"


def test_canned_response_returned_verbatim(views):
    text = "A chair with four legs,\n a slatted back."
    with Service([(200, {"caption": text})]) as svc:
        out = caption_request("{}", views, svc.url, mock=False, sleep=lambda s: None)
    assert out == text
    sent = svc.requests[0]
    assert sent["prompt"] == CaptionConfig().template
    assert [base64.b64decode(s) for s in sent["images"]] == [p.read_bytes() for p in views]


def test_server_errors_retry_then_unavailable(views):
    delays = []
    with Service([(500, {"error": "boom"})]) as svc:
        with pytest.raises(CaptionUnavailableError):
            caption_request("{}", views, svc.url, mock=False, sleep=delays.append)
    assert len(svc.requests) == 3
    assert delays == [0.5, 1.0]


def test_recovers_after_transient_failure(views):
    with Service([(500, {}), (200, {"caption": "ok"})]) as svc:
        assert caption_request("{}", views, svc.url, mock=False, sleep=lambda s: None) == "ok"
    assert len(svc.requests) == 2


def test_missing_caption_field_is_failure(views):
    with Service([(200, {"text": "no"})]) as svc:
        with pytest.raises(CaptionUnavailableError):
            caption_request("{}", views, svc.url, CaptionConfig(retries=2), mock=False, sleep=lambda s: None)


def test_no_endpoint(views, monkeypatch):
    monkeypatch.delenv("CAPTION_ENDPOINT", raising=False)
    with pytest.raises(CaptionUnavailableError):
        caption_request("{}", views, mock=False)


def test_mock_deterministic(monkeypatch):
    a = caption_request('{"x": 1}', mock=True)
    assert a == caption_request('{"x": 1}', mock=True) == mock_caption('{"x": 1}')
    assert a != caption_request('{"x": 2}', mock=True)
    monkeypatch.setenv("CAPTION_MOCK", "1")
    assert caption_request('{"x": 1}') == a


def test_request_validation(views):
    with pytest.raises(ValueError):
        CaptionRequest([], "describe")
    with pytest.raises(ValueError):
        CaptionRequest(views + views[:1], "describe")
    with pytest.raises(ValueError):
        CaptionRequest(views, "  ")


def test_cli_stores_null_prompt_when_unavailable(tmp_path, record, views, monkeypatch):
    monkeypatch.delenv("CAPTION_MOCK", raising=False)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"caption": {"backoff": 0.0}}))
    with Service([(500, {})]) as svc:
        code = main(["--config", str(cfg), "caption", "--record", str(record), "--images", *map(str, views),
                     "--endpoint", svc.url, "--out", str(tmp_path / "c")])
    assert code == 0
    assert len(svc.requests) == 3
    assert load_record(tmp_path / "c" / "record.json").prompt is None


def test_cli_stores_service_caption(tmp_path, record, views, monkeypatch):
    monkeypatch.delenv("CAPTION_MOCK", raising=False)
    with Service([(200, {"caption": "a cube"})]) as svc:
        code = main(["caption", "--record", str(record), "--images", *map(str, views[:2]),
                     "--endpoint", svc.url, "--out", str(tmp_path / "c")])
    assert code == 0
    assert load_record(tmp_path / "c" / "record.json").prompt == "a cube"
