import numpy as np
import pytest

from gevit import cli, errormap
from gevit.certify import CertReport, CheckRecord, run_checks, transform_lifted
from gevit.model import ModelConfig, build


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.txt"
    path.write_text("# tiny model for command tests\n"
                    "embed_dim=4\nheads=2\nhead_dim=3\nblocks=1\nmlp_hidden=6\npe_hidden_width=5\n"
                    "neighborhood=3\ndownsample=4\ntrain_count=40\nval_count=20\ntest_count=20\n"
                    "epochs=1\neval_batch=10\nboundary=torus\n")
    return path


def test_check_passes_and_writes_reports(tmp_path, capsys):
    assert cli.main(["check", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "check_report.txt").read_text()
    assert "FAILED" not in text and "expected-fail" in text
    csv_lines = (tmp_path / "check_report.csv").read_text().splitlines()
    assert csv_lines[0].startswith("name,group,layer")
    names = [line.split(",")[0] for line in csv_lines[1:]]
    assert names == sorted(names) and len(set(names)) == len(names)


def test_check_is_byte_stable():
    a = run_checks(ModelConfig(group="d4"), seed=3)
    b = run_checks(ModelConfig(group="d4"), seed=3)
    assert a.to_text() == b.to_text() and a.to_csv() == b.to_csv()


def test_check_baseline_marks_expected_failures():
    rep = run_checks(ModelConfig(pe_variant="baseline"), seed=0)
    base = [r for r in rep.records if r.name.endswith(".baseline") and "translation" not in r.name]
    assert base and all(r.negative_control and r.max_abs_error >= 1e-2 for r in base)
    assert rep.ok


def test_report_verdict_rules():
    good = CheckRecord("a", "-", "x", "t", 1e-12, 1e-13, "f64", 1e-10)
    bad = CheckRecord("b", "-", "x", "t", 1e-3, 1e-4, "f64", 1e-10)
    neg = CheckRecord("c", "-", "x", "t", 1e-6, 1e-7, "f64", 1e-3, negative_control=True)
    assert CertReport([good, neg]).ok
    assert not CertReport([bad, good]).ok
    assert neg.status == "UNEXPECTED-PASS"
    with pytest.raises(ValueError):
        CertReport([good, good])


def test_errormap_identity_is_zero_and_ground_truth_inverts():
    cfg = ModelConfig(image_size=6, embed_dim=4, heads=2, head_dim=3, blocks=1, mlp_hidden=6,
                      neighborhood=3, pe_hidden_width=5)
    model = build(cfg, 0)
    img = np.random.default_rng(0).uniform(0, 1, (6, 6))
    assert errormap.compute(model, img, 0).mean_abs_error == 0.0
    em = errormap.compute(model, img, 1)
    g = model.group
    back = transform_lifted(em.expected[None], g, g.inverse(1), 6, 6)[0]
    np.testing.assert_array_equal(back, em.original)
    assert em.mean_abs_error < 1e-5


def test_pgm_roundtrip_and_normalization(tmp_path):
    a = np.array([[0.0, 0.5], [1.0, 2.0]])
    errormap.write_pgm(tmp_path / "a.pgm", a)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n2 2\n255\n")
    assert list(raw[-4:]) == [0, 64, 128, 255]
    np.testing.assert_allclose(errormap.read_pgm(tmp_path / "a.pgm") * 255, [[0, 64], [128, 255]])
    assert not errormap.to_uint8(np.full((2, 2), 3.0)).any()


def test_errormap_command(tmp_path, small_config, capsys):
    out = tmp_path / "em"
    assert cli.main(["errormap", "--config", str(small_config), "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    err = float(printed.split("average_abs_error=")[1].split()[0])
    assert err < 1e-5
    assert len(list(out.glob("error_c*.pgm"))) == 4
    assert (out / "errors.csv").read_text().startswith("row,col,element,channel")
    with pytest.raises(SystemExit):
        cli.main(["errormap", "--config", str(small_config), "--group", "c8", "--out", str(out)])


def test_train_then_eval(tmp_path, small_config, capsys):
    run = tmp_path / "run"
    assert cli.main(["train", "--config", str(small_config), "--out", str(run)]) == 0
    log = (run / "train_log.txt").read_text()
    assert "epoch=1" in log and (run / "best.gevt").exists()
    capsys.readouterr()
    assert cli.main(["eval", "--checkpoint", str(run / "best.gevt"), "--split", "val",
                     "--out", str(run)]) == 0
    text = capsys.readouterr().out
    acc = float(text.split("accuracy=")[1].split()[0])
    rot = float(text.split("accuracy_rotated90=")[1].split()[0])
    assert acc == rot
    rows = (run / "eval_val_confusion.csv").read_text().splitlines()[1:]
    assert sum(sum(int(c) for c in r.split(",")[1:]) for r in rows) == 20


def test_eval_rejects_incompatible_checkpoint(tmp_path, small_config, capsys):
    m = build(ModelConfig(image_size=7, embed_dim=5, heads=1, head_dim=2, blocks=1, mlp_hidden=3,
                          neighborhood=3, pe_hidden_width=5), 0)
    m.save(tmp_path / "other.gevt")
    code = cli.main(["eval", "--config", str(small_config), "--checkpoint", str(tmp_path / "other.gevt")])
    assert code == 2
    assert "shape mismatch" in capsys.readouterr().err


def test_bad_config_key(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("colour=blue\n")
    assert cli.main(["check", "--config", str(bad)]) == 2


def test_training_replay_is_bit_identical(small_config):
    from gevit.train import fit, load_configs
    mcfg, tcfg = load_configs(small_config)
    tcfg.epochs = 2
    a = fit(mcfg, tcfg)
    b = fit(mcfg, tcfg)
    assert a["losses"] == b["losses"] and a["val_acc"] == b["val_acc"]
    short = fit(mcfg, tcfg, max_steps=3)["losses"]
    assert short == a["losses"][:3]
