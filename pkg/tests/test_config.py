import pytest

from mpituning import config as C
from mpituning.errors import FormatError


def test_defaults_without_file():
    cfg = C.load_config()
    assert cfg == C.DEFAULTS and cfg is not C.DEFAULTS


def test_precedence(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[peft]\nM = 4\nvisual_deep = no\n[finetune]\nlr = 0.002  # inline\n")
    cfg = C.load_config(path, {"peft": {"M": 7, "n_ctx": None}})
    assert cfg["peft"]["M"] == 7                      # flag beats file
    assert cfg["finetune"]["lr"] == 0.002             # file beats default
    assert cfg["peft"]["visual_deep"] is False
    assert cfg["peft"]["n_ctx"] == C.DEFAULTS["peft"]["n_ctx"]


def test_tuple_values():
    assert C.parse_ini("[experiment]\nbaselines = adapter, coop\n") == \
        {"experiment": {"baselines": ("adapter", "coop")}}


@pytest.mark.parametrize("text,message", [
    ("[nope]\nx = 1\n", "unknown config section"),
    ("[peft]\nwidth = 3\n", "unknown key"),
    ("[peft]\nM = twelve\n", "cannot parse"),
    ("[loss]\naux = maybe\n", "cannot parse"),
    ("M = 3\n", "malformed"),
])
def test_rejects_bad_files(text, message):
    with pytest.raises(FormatError, match=message):
        C.parse_ini(text, "bad.ini")


def test_missing_file(tmp_path):
    with pytest.raises(FormatError, match="cannot read"):
        C.load_config(tmp_path / "absent.ini")


def test_ini_round_trip():
    cfg = C.load_config(overrides={"experiment": {"baselines": ("adapter",)}})
    assert C.load_config(overrides=C.parse_ini(C.to_ini(cfg))) == cfg


def test_hash_tracks_content():
    a = C.load_config()
    b = C.load_config(overrides={"run": {"seed": 3}})
    assert C.config_hash(a) == C.config_hash(C.load_config())
    assert C.config_hash(a) != C.config_hash(b)


def test_typed_views():
    cfg = C.load_config(overrides={"finetune": {"clip_norm": 0.0}})
    assert C.train_config(cfg, "finetune").clip_norm is None
    assert C.scene_config(cfg, "finetune").image_size == cfg["detector"]["image_size"]
    assert C.detector_config(cfg).num_insertion_points == 10
    assert C.peft_config(cfg).M == 12


def test_thread_limit(monkeypatch):
    monkeypatch.delenv(C.THREADS_ENV, raising=False)
    assert C.thread_limit() == 1
    monkeypatch.setenv(C.THREADS_ENV, "4")
    assert C.thread_limit() == 4
    for bad in ("0", "many"):
        monkeypatch.setenv(C.THREADS_ENV, bad)
        with pytest.raises(FormatError):
            C.thread_limit()
