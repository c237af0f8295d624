import argparse
import re

import numpy as np
import pytest

from malariadx import cli
from malariadx.augment import AugmentConfig
from malariadx.checkpoint import load_checkpoint
from malariadx.data import SynthConfig, read_png, synth_generate, write_png
from malariadx.metrics import format_report, parse_report, reference_reports
from malariadx.training import TrainConfig

SYNTH = ["--synth", "--synth-per-class", "10"]


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code = cli.main(["train", *SYNTH, "--epochs", "2", "--seed", "3", "--out", str(out)])
    assert code == 0
    return out


# ---------------------------------------------------------------------------
# parser and config file


def test_help_lists_every_default():
    for name, sub in cli._subparsers(cli.build_parser()).items():
        text = " ".join(sub.format_help().split())
        for action in sub._actions:
            if not action.option_strings or action.help in (None, argparse.SUPPRESS):
                continue
            if isinstance(action, (argparse._HelpAction, argparse._StoreTrueAction)):
                continue
            if action.required:
                continue
            assert f"(default: {action.default})" in text, (name, action.dest)


def test_defaults_match_module_defaults():
    sub = cli._subparsers(cli.build_parser())["train"]
    args = sub.parse_args(["--synth"])
    assert args.epochs == TrainConfig.epochs and args.lr == TrainConfig.learning_rate
    assert args.batch_size == TrainConfig.batch_size and args.adam_eps == TrainConfig.eps
    assert args.mixup_alpha == AugmentConfig.mixup_alpha
    assert args.augment_probability == AugmentConfig.apply_probability
    assert args.synth_per_class == SynthConfig.per_class and tuple(args.ratios) == (7, 2, 1)


def test_precedence_flags_over_file_over_defaults(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nepochs = 3\nbatch-size=8\nno_augment=true\n")
    parser = cli.build_parser()
    cli._apply_config(parser, cli.read_config_file(cfg), cfg)
    args = parser.parse_args(["train", "--synth", "--epochs", "5"])
    assert args.epochs == 5 and args.batch_size == 8 and args.no_augment is True
    assert args.lr == TrainConfig.learning_rate


def test_config_errors_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("not_a_flag=1\n")
    code, _, err = run(["--config", cfg, "train", "--synth"], capsys)
    assert code == 2 and err.startswith("error: config:") and err.count("\n") == 1
    cfg.write_text("epochs=many\n")
    assert run(["--config", cfg, "train", "--synth"], capsys)[0] == 2
    assert run(["--config", tmp_path / "missing.cfg", "train", "--synth"], capsys)[0] == 2


def test_missing_dataset_leaves_no_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    code, _, err = run(["train", "--data-root", tmp_path / "nope", "--out", out], capsys)
    assert code == 2 and "config" in err and not out.exists()
    code, _, _ = run(["train", "--synth", "--data-root", tmp_path, "--out", out], capsys)
    assert code == 2 and not out.exists()
    code, _, _ = run(["train", "--out", out], capsys)
    assert code == 2 and not out.exists()


def test_bad_layout_is_data_error(tmp_path, capsys):
    (tmp_path / "Parasitized").mkdir()
    code, _, err = run(["train", "--data-root", tmp_path, "--out", tmp_path / "o"], capsys)
    assert code == 3 and err.startswith("error: data:")


def test_manifest_mismatch_is_data_error(tmp_path, capsys):
    manifest = tmp_path / "m.tsv"
    manifest.write_text("Parasitized/elsewhere.png\tParasitized\ttrain\n")
    code, _, _ = run(["train", *SYNTH, "--manifest", manifest, "--out", tmp_path / "o"], capsys)
    assert code == 3


# ---------------------------------------------------------------------------
# train and eval


def test_train_outputs(trained):
    for name in ("manifest.tsv", "run.cfg", "initial.plsm", "checkpoint.plsm", "epochs.tsv"):
        assert (trained / name).is_file()
    lines = (trained / "epochs.tsv").read_text().splitlines()
    assert len(lines) == 2 and all(len(line.split("\t")) == 6 for line in lines)


def test_train_rerun_is_byte_identical(trained, tmp_path, capsys):
    code, out, _ = run(["train", *SYNTH, "--epochs", "2", "--seed", "3", "--out", tmp_path], capsys)
    assert code == 0 and out.startswith("best_epoch\t")
    for name in ("manifest.tsv", "run.cfg", "initial.plsm", "checkpoint.plsm"):
        assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()

    def strip_time(p):
        return [line.rsplit("\t", 1)[0] for line in p.read_text().splitlines()]
    assert strip_time(tmp_path / "epochs.tsv") == strip_time(trained / "epochs.tsv")


def test_freeze_contract(tmp_path, capsys):
    code, _, _ = run(["train", *SYNTH, "--epochs", "2", "--freeze", "stem,stage0", "--out", tmp_path], capsys)
    assert code == 0
    before, _ = load_checkpoint(tmp_path / "initial.plsm")
    after, _ = load_checkpoint(tmp_path / "checkpoint.plsm")
    changed = False
    for name in {**before.tensors, **before.buffers}:
        a = before.tensors.get(name, before.buffers.get(name)).data
        b = after.tensors.get(name, after.buffers.get(name)).data
        if name.startswith(("stem.", "stage0.")):
            assert a.tobytes() == b.tobytes(), name
        elif a.tobytes() != b.tobytes():
            changed = True
    assert changed


def test_init_checkpoint(trained, tmp_path, capsys):
    code, _, _ = run(["train", *SYNTH, "--epochs", "1", "--init-checkpoint", trained / "checkpoint.plsm",
                      "--out", tmp_path], capsys)
    assert code == 0
    init, _ = load_checkpoint(tmp_path / "initial.plsm")
    src, _ = load_checkpoint(trained / "checkpoint.plsm")
    assert init["stem.conv0.weight"].data.tobytes() == src["stem.conv0.weight"].data.tobytes()


def test_eval_splits_and_determinism(trained, tmp_path, capsys):
    ckpt = trained / "checkpoint.plsm"
    for split in ("test", "validation"):
        assert run(["eval", *SYNTH, "--seed", "3", "--checkpoint", ckpt, "--split", split,
                    "--out", tmp_path], capsys)[0] == 0
    test_csv = (tmp_path / "metrics_test.csv").read_bytes()
    assert (tmp_path / "metrics_validation.csv").is_file()
    assert run(["eval", *SYNTH, "--seed", "3", "--checkpoint", ckpt, "--out", tmp_path], capsys)[0] == 0
    assert (tmp_path / "metrics_test.csv").read_bytes() == test_csv
    rows = parse_report((tmp_path / "metrics_test.txt").read_text())
    assert len(rows) == 1 and rows[0].model == "Proposed Model"


def test_eval_corrupt_checkpoint_exit_4(trained, tmp_path, capsys):
    blob = bytearray((trained / "checkpoint.plsm").read_bytes())
    blob[len(blob) // 2] ^= 0x40
    bad = tmp_path / "bad.plsm"
    bad.write_bytes(bytes(blob))
    code, _, err = run(["eval", *SYNTH, "--checkpoint", bad, "--out", tmp_path / "o"], capsys)
    assert code == 4 and err.startswith("error: checkpoint:")


def test_eval_reference_table(tmp_path, capsys):
    assert run(["eval", "--reference", "--out", tmp_path], capsys)[0] == 0
    text = (tmp_path / "report.txt").read_text()
    assert text == format_report(reference_reports())
    assert re.search(r"^Proposed Model\s+0\.9875\s+0\.993\s+0\.995$", text, re.M)
    assert re.search(r"^Watershed Segmentation\s+0\.90\s+0\.643\s+0\.662$", text, re.M)
    csv_path = tmp_path / "report.csv"
    assert run(["eval", "--reports", csv_path, "--out", tmp_path / "again"], capsys)[0] == 0
    assert (tmp_path / "again" / "report.txt").read_text() == text


# ---------------------------------------------------------------------------
# baselines


def test_baselines_table(trained, tmp_path, capsys):
    code, out, _ = run(["baselines", *SYNTH, "--seed", "3", "--epochs", "1", "--trees", "5",
                        "--checkpoint", trained / "checkpoint.plsm", "--out", tmp_path], capsys)
    assert code == 0
    rows = parse_report((tmp_path / "comparison.txt").read_text())
    assert [r.model for r in rows] == ["Random Forest", "VGG-mini (no skip)",
                                       "Watershed Segmentation", "Proposed Model"]
    hashes = {line.rsplit(": ", 1)[1] for line in out.splitlines() if line.startswith("manifest sha256")}
    assert len(hashes) == 1
    assert hashes == {l.split("\t")[1] for l in (tmp_path / "comparison_manifest.tsv").read_text().splitlines()}


# ---------------------------------------------------------------------------
# augmentation preview


def preview(tmp_path, capsys, *extra):
    code, _, _ = run(["augment-preview", *SYNTH, "--seed", "5", "--out", tmp_path, *extra], capsys)
    assert code == 0
    return (tmp_path / "augment_preview.png").read_bytes(), (tmp_path / "augment_preview.txt").read_text()


def test_preview_is_deterministic(tmp_path, capsys):
    a = preview(tmp_path / "a", capsys)
    b = preview(tmp_path / "b", capsys)
    assert a == b


def test_preview_lambda_one_rows_identical(tmp_path, capsys):
    preview(tmp_path, capsys, "--force-lambda", "1")
    grid = read_png(tmp_path / "augment_preview.png")
    h = 64
    rows = [grid[:, r * (h + 2):r * (h + 2) + h, :] for r in range(3)]
    assert np.array_equal(rows[0], rows[1]) and np.array_equal(rows[0], rows[2])


def test_preview_sidecar_replays(tmp_path, capsys):
    _, text = preview(tmp_path, capsys, "--cutmix-alpha", "1.0")
    lines = text.splitlines()
    lam_mix = float(lines[0].split("\t")[1])
    cols = [line.split("\t") for line in lines[3:]]
    labels = [int(c[3]) for c in cols]
    for c in cols:
        partner = int(c[2])
        y, yp = int(c[3]), labels[partner]
        assert float(c[4]) == lam_mix * y + (1 - lam_mix) * yp
        y0, y1, x0, x1 = map(int, c[6].split(","))
        lam_eff = float(c[5])
        assert lam_eff == 1 - (y1 - y0) * (x1 - x0) / (64 * 64)
        assert float(c[7]) == lam_eff * y + (1 - lam_eff) * yp


def test_preview_rejects_bad_lambda(tmp_path, capsys):
    assert run(["augment-preview", *SYNTH, "--force-lambda", "2", "--out", tmp_path / "o"], capsys)[0] == 2
    assert not (tmp_path / "o").exists()


# ---------------------------------------------------------------------------
# predict


def test_predict_partial_failure(trained, tmp_path, capsys):
    samples, _ = synth_generate(SynthConfig(per_class=1, seed=99))
    paths = []
    for i, s in enumerate(samples):
        paths.append(tmp_path / f"{i}.png")
        write_png(s.image, paths[-1])
    broken = tmp_path / "broken.png"
    broken.write_bytes(b"\x89PNG garbage")
    code, out, err = run(["predict", paths[0], broken, paths[1], "--checkpoint",
                          trained / "checkpoint.plsm"], capsys)
    assert code == 5
    lines = out.splitlines()
    assert len(lines) == 2 and err.count("\n") == 1 and "broken.png" in err
    for line in lines:
        path, p, label = line.split("\t")
        assert 0 < float(p) < 1 and label in ("parasitized", "uninfected")


def test_predict_all_failing_is_data_error(trained, tmp_path, capsys):
    broken = tmp_path / "x.png"
    broken.write_bytes(b"nope")
    assert run(["predict", broken, "--checkpoint", trained / "checkpoint.plsm"], capsys)[0] == 3
