import csv
import hashlib
import json
import math
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from cherryq import cli
from cherryq.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from cherryq.config import DEFAULTS, resolve

ROOT = Path(__file__).resolve().parent.parent
SMOKE = str(ROOT / "configs" / "smoke.json")


def schema(name):
    return json.loads((ROOT / "schemas" / f"{name}.schema.json").read_text())


def validate(obj, name):
    jsonschema.validate(obj, schema(name), cls=jsonschema.Draft202012Validator)


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def csv_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def typed(row):
    out = {}
    for k, v in row.items():
        if k in ("matrix", "metric"):
            out[k] = v
        elif k in ("index", "row", "col", "n_top"):
            out[k] = int(v)
        else:
            out[k] = "inf" if v == "inf" else float(v)
    return out


@pytest.fixture(scope="module")
def base_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("base")
    assert cli.main(["train-base", "--config", SMOKE, "--seed", "0", "--out", str(out)]) == 0
    return out


# -- train-base ------------------------------------------------------------------------

def test_train_base_outputs_valid(base_dir):
    log = json.loads((base_dir / "base.log.json").read_text())
    validate(log, "train_log")
    assert len(log["steps"]) == 10
    manifest = json.loads((base_dir / "base.manifest.json").read_text())
    validate(manifest, "manifest")
    validate({k: v for k, v in manifest["config"].items()}, "config")
    assert manifest["subcommand"] == "train-base" and manifest["seed"] == 0


def test_same_seed_same_checkpoint_bytes(base_dir, tmp_path):
    assert cli.main(["train-base", "--config", SMOKE, "--seed", "0", "--out", str(tmp_path)]) == 0
    assert sha(tmp_path / "base.chrq") == sha(base_dir / "base.chrq")


def test_other_seed_other_checkpoint(base_dir, tmp_path):
    assert cli.main(["train-base", "--config", SMOKE, "--seed", "1", "--out", str(tmp_path)]) == 0
    assert sha(tmp_path / "base.chrq") != sha(base_dir / "base.chrq")


# -- exit codes ---------------------------------------------------------------------------

def test_missing_corpus_names_path(capsys, tmp_path):
    missing = tmp_path / "no_such_corpus.txt"
    code, _, err = run(capsys, "train-base", "--config", SMOKE, "--corpus", str(missing), "--out", str(tmp_path))
    assert code == 3 and str(missing) in err


def test_corrupt_checkpoint_exit_3(capsys, base_dir, tmp_path):
    bad = tmp_path / "bad.chrq"
    raw = bytearray((base_dir / "base.chrq").read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    bad.write_bytes(bytes(raw))
    code, _, err = run(capsys, "eval", "--config", SMOKE, "--checkpoint", str(bad))
    assert code == 3 and "checksum" in err


def test_unsupported_bits_exit_2(capsys):
    code, _, err = run(capsys, "avgbits", "--set", "qat.quant.bits=7")
    assert code == 2 and err


def test_unknown_config_key_exit_2(capsys):
    code, _, err = run(capsys, "avgbits", "--set", "qat.quant.colour=1")
    assert code == 2 and "colour" in err


def test_divergence_exit_4(capsys, base_dir, tmp_path):
    code, _, err = run(capsys, "cherryq", "--config", SMOKE, "--base", str(base_dir / "base.chrq"),
                       "--set", "qat.peak_lr=1e9", "--set", "qat.steps=30", "--set", "qat.warmup_frac=0",
                       "--out", str(tmp_path))
    assert code == 4 and err


# -- avgbits / eval -----------------------------------------------------------------------

@pytest.mark.parametrize("bits,group,frac,expected", [
    (3, 128, 1 / 256, "3.1758"), (3, 64, 1 / 256, "3.3008"), (4, 128, 1 / 256, "4.1719"),
    (2, 128, 1 / 256, "2.1836"), (3, 128, 0, "3.1250"), (3, 64, 0, "3.2500"),
])
def test_avgbits_prints_value(capsys, bits, group, frac, expected):
    code, out, _ = run(capsys, "avgbits", "--set", f"qat.quant.bits={bits}", "--set", f"qat.quant.group_size={group}",
                       "--set", f"qat.quant.cherry_fraction={frac}")
    assert code == 0 and out.strip() == expected


def test_eval_json(capsys, base_dir, tmp_path):
    out_file = tmp_path / "eval.json"
    code, out, _ = run(capsys, "eval", "--config", SMOKE, "--checkpoint", str(base_dir / "base.chrq"),
                       "--out", str(out_file))
    assert code == 0
    result = json.loads(out)
    validate(result, "eval")
    assert result == json.loads(out_file.read_text())
    assert result["config"]["quant"] is None and 1 < result["perplexity"] < 256 * 4


# -- analyze ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def analyzed(base_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("analyze")
    assert cli.main(["analyze", "--config", SMOKE, "--checkpoint", str(base_dir / "base.chrq"),
                     "--out", str(out)]) == 0
    return out


def test_analyze_outputs_valid(analyzed):
    names = [f"layers.0.self_attn.{p}_proj" for p in "qkvo"] + ["layers.0.mlp.up_proj", "layers.0.mlp.down_proj"]
    for n in names:
        rows = csv_rows(analyzed / "scatter" / f"{n}.csv")
        assert 0 < len(rows) <= 4096
        for r in rows[:50]:
            validate(typed(r), "scatter_row")
    het = csv_rows(analyzed / "heterogeneity.csv")
    assert len(het) == 3 * len(names)
    assert {(r["matrix"], r["metric"]) for r in het} == {(n, m) for n in names for m in ("impact", "weight", "activation")}
    for r in het:
        validate(typed(r), "heterogeneity_row")
    validate(json.loads((analyzed / "summary.json").read_text()), "summary")
    validate(json.loads((analyzed / "analyze.manifest.json").read_text()), "manifest")
    overlap = json.loads((analyzed / "overlap.json").read_text())
    validate(overlap, "overlap")
    assert len(overlap["pairs"]) == 1 and overlap["pairs"][0]["kind"] == "within"
    with np.load(analyzed / "impacts.npz") as z:
        assert sorted(z.files) == sorted(names)


def test_scatter_rows_consistent(analyzed, base_dir):
    model = load_checkpoint(base_dir / "base.chrq").to_model()
    name = "layers.0.mlp.up_proj"
    w = model.params[name].data
    for r in csv_rows(analyzed / "scatter" / f"{name}.csv")[:20]:
        i, row, col = int(r["index"]), int(r["row"]), int(r["col"])
        assert i == row * w.shape[1] + col
        assert float(r["weight"]) == abs(float(w[row, col]))


def test_five_splits_give_ten_pairs(base_dir, tmp_path):
    assert cli.main(["analyze", "--config", SMOKE, "--checkpoint", str(base_dir / "base.chrq"),
                     "--splits", "5", "--out", str(tmp_path)]) == 0
    pairs = json.loads((tmp_path / "overlap.json").read_text())["pairs"]
    assert len(pairs) == 10 and len({(p["a"], p["b"]) for p in pairs}) == 10


def test_second_corpus_adds_across_pairs(base_dir, tmp_path):
    assert cli.main(["analyze", "--config", SMOKE, "--checkpoint", str(base_dir / "base.chrq"),
                     "--corpus2", "synthetic:20000:9", "--out", str(tmp_path)]) == 0
    pairs = json.loads((tmp_path / "overlap.json").read_text())["pairs"]
    kinds = [p["kind"] for p in pairs]
    assert len(pairs) == 6 and kinds.count("within") == 2 and kinds.count("across") == 4


def test_too_many_splits_is_data_error(capsys, base_dir, tmp_path):
    code, _, err = run(capsys, "analyze", "--config", SMOKE, "--checkpoint", str(base_dir / "base.chrq"),
                       "--splits", "500", "--out", str(tmp_path))
    assert code == 3 and "too small" in err


def test_constant_weights_score_one(base_dir, tmp_path):
    model = load_checkpoint(base_dir / "base.chrq").to_model()
    for n in model.weight_matrix_names():
        model.params[n].data[...] = 0.02
    path = tmp_path / "flat.chrq"
    save_checkpoint(Checkpoint.from_model(model), path)
    assert cli.main(["analyze", "--config", SMOKE, "--checkpoint", str(path), "--out", str(tmp_path / "a")]) == 0
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["min_score"]["weight"] == 1.0 and summary["median_score"]["weight"] == 1.0


def test_overlap_subcommand(capsys, analyzed):
    imp = str(analyzed / "impacts.npz")
    code, out, _ = run(capsys, "overlap", "--impacts-a", imp, "--impacts-b", imp, "--fraction", "0.1")
    result = json.loads(out)
    assert code == 0 and result["mean"] == 100.0
    validate(result, "overlap")


# -- cherryq --------------------------------------------------------------------------------

@pytest.mark.parametrize("metric", ["impact", "weight", "activation"])
def test_cherryq_every_metric(capsys, base_dir, tmp_path, metric):
    code, out, _ = run(capsys, "cherryq", "--config", SMOKE, "--base", str(base_dir / "base.chrq"),
                       "--set", f"qat.metric=\"{metric}\"", "--out", str(tmp_path))
    assert code == 0
    log = json.loads((tmp_path / "cherryq.log.json").read_text())
    validate(log, "train_log")
    validate(json.loads((tmp_path / "cherryq.manifest.json").read_text()), "manifest")
    assert all(len(c) == 1 for c in log["cherry_columns"].values())
    ck = load_checkpoint(tmp_path / "cherryq.chrq")
    assert len(ck.mixed) == 6


def test_cherryq_with_precomputed_impacts(base_dir, analyzed, tmp_path):
    assert cli.main(["cherryq", "--config", SMOKE, "--base", str(base_dir / "base.chrq"),
                     "--impacts", str(analyzed / "impacts.npz"), "--out", str(tmp_path)]) == 0
    log = json.loads((tmp_path / "cherryq.log.json").read_text())
    with np.load(analyzed / "impacts.npz") as z:
        for n, cols in log["cherry_columns"].items():
            assert cols == [int(np.argmax(z[n].mean(axis=0)))]


def test_cherryq_fraction_zero(base_dir, tmp_path):
    assert cli.main(["cherryq", "--config", SMOKE, "--base", str(base_dir / "base.chrq"),
                     "--set", "qat.quant.cherry_fraction=0", "--set", "qat.calib_sequences=0",
                     "--out", str(tmp_path)]) == 0
    log = json.loads((tmp_path / "cherryq.log.json").read_text())
    assert all(c == [] for c in log["cherry_columns"].values())


def test_two_bit_scales_frozen(base_dir, tmp_path):
    assert cli.main(["cherryq", "--config", SMOKE, "--base", str(base_dir / "base.chrq"),
                     "--set", "qat.quant.bits=2", "--save-step0", "--out", str(tmp_path)]) == 0
    start = load_checkpoint(tmp_path / "cherryq.step0.chrq")
    final = load_checkpoint(tmp_path / "cherryq.chrq")
    log = json.loads((tmp_path / "cherryq.log.json").read_text())
    assert set(log["scale_search_alpha"]) == set(final.mixed)
    for n, m in final.mixed.items():
        assert m.trick_scales is not None
        assert m.trick_scales.tobytes() == start.mixed[n].trick_scales.tobytes()


def test_quantized_eval_reports_quant(capsys, base_dir, tmp_path):
    assert cli.main(["cherryq", "--config", SMOKE, "--base", str(base_dir / "base.chrq"), "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    code, out, _ = run(capsys, "eval", "--config", SMOKE, "--checkpoint", str(tmp_path / "cherryq.chrq"))
    result = json.loads(out)
    assert code == 0 and result["config"]["quant"]["bits"] == 3 and math.isfinite(result["perplexity"])


# -- configuration ---------------------------------------------------------------------------

def test_precedence_flags_over_file_over_defaults(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"steps": 7, "batch_size": 3}}))
    cfg = resolve(path, ["train.steps=9"], {"train.seed": 5})
    assert cfg["train"]["steps"] == 9 and cfg["train"]["batch_size"] == 3 and cfg["train"]["seed"] == 5
    assert cfg["train"]["peak_lr"] == DEFAULTS["train"]["peak_lr"]


def test_shipped_configs_validate():
    for path in (ROOT / "configs").glob("*.json"):
        validate(json.loads(path.read_text()), "config")
        resolve(path)


def test_data_dir_env(monkeypatch, tmp_path, capsys):
    (tmp_path / "tiny.txt").write_text("the cat sat on the mat. " * 800)
    monkeypatch.setenv("CHERRYQ_DATA_DIR", str(tmp_path))
    code, _, _ = run(capsys, "train-base", "--config", SMOKE, "--corpus", "tiny.txt", "--steps", "2",
                     "--out", str(tmp_path / "o"))
    assert code == 0
    manifest = json.loads((tmp_path / "o" / "base.manifest.json").read_text())
    assert manifest["config"]["corpus"] == "tiny.txt" and manifest["config"]["train"]["steps"] == 2
