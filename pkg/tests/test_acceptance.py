"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The trend criteria (5 to 8) train real networks on ShapeSet and take most
of an hour on one core. Runs are cached per module so criteria 5 and 6 share
the same training runs, and criterion 8 reuses one pair from criterion 7.
"""
import contextlib
import io
import time

import numpy as np
import pytest

from rdcr import cli
from rdcr import config as cfgmod
from rdcr.data import parse_cifar_records, serialize_cifar_records
from rdcr.experiment import run_experiment
from rdcr.metrics import best_last, pseudo_confusion
from rdcr.nn import NormalizationKind, build_backbone
from rdcr.noise import (NoisyDataset, corrupt_labels, default_pairing, empirical_transition,
                        pairwise_asymmetric_matrix, symmetric_matrix)
from rdcr.rotation import rotate90
from rdcr.training import (LossWeights, Schedule, SWAState, TeacherState, clip_gradients, ema_update,
                           global_norm, load_checkpoint, pseudo_labels, run_training, save_checkpoint,
                           swa_capture)

from test_training import _reference_mean_teacher, micro_config, small_data, small_net

SEEDS = (0, 1, 2)
SEMI_EPOCHS = 18
SEMI_CLUTTER = 0.6
BUDGET_S = 30 * 60

CE = {"weights.s.kind": "constant", "weights.s.start": 1.0, "weights.c.kind": "constant",
      "weights.c.start": 0.0, "weights.r.kind": "constant", "weights.r.start": 0.0,
      "train.rotation": False}
MT = {"weights.r.kind": "constant", "weights.r.start": 0.0, "train.rotation": False}
RD = {}
METHODS = {"CE": CE, "MT": MT, "RD-MT": RD}


def verdict(report, n, title, ok, detail):
    report(n, title, bool(ok), detail)
    assert ok, f"criterion {n} ({title}): {detail}"


def tiny(name, seed, **over):
    cfg = cfgmod.preset(name, "tiny")
    cfg.update(over)
    cfg["seed"] = seed
    return cfgmod.resolve(cfg)


class RunCache:
    def __init__(self):
        self.runs = {}

    def get(self, key, cfg):
        if key not in self.runs:
            t = time.perf_counter()
            exp = run_experiment(cfg)
            seconds = time.perf_counter() - t
            ds, res = exp.dataset, exp.training
            idx = ds.train_index_set
            guess = pseudo_labels(res.teacher.params, ds.images[idx])[0]
            conf = pseudo_confusion(guess, ds.audit_true_labels()[idx], ds.K)
            self.runs[key] = {"log": res.log, "diag": conf.diagonal_mean(), "seconds": seconds}
        return self.runs[key]


@pytest.fixture(scope="module")
def cache():
    return RunCache()


# ----------------------------------------------------------------- 1

def test_criterion_1_gradcheck(acceptance_report):
    out = io.StringIO()
    t = time.perf_counter()
    with contextlib.redirect_stdout(out):
        code = cli.main(["gradcheck", "--preset", "tiny"])
    seconds = time.perf_counter() - t
    summary = out.getvalue().strip().splitlines()[-1]
    verdict(acceptance_report, 1, "gradient check", code == 0 and seconds < 120,
            f"{summary}; wall {seconds:.1f} s of 120 s")


# ----------------------------------------------------------------- 2

def test_criterion_2_noise_fidelity(acceptance_report):
    K, N = 10, 100_000
    t = time.perf_counter()
    labels = np.arange(N) % K
    clean = NoisyDataset.from_clean(np.zeros((N, 1, 1, 1)), labels, K)
    cases = [(f"sym {e}", symmetric_matrix(K, e), e) for e in (0.2, 0.5, 0.8)]
    cases.append(("asym 0.4", pairwise_asymmetric_matrix(K, 0.4, default_pairing(K)), 0.4))
    worst_entry, worst_frac = 0.0, 0.0
    for i, (_, T, eps) in enumerate(cases):
        noisy = corrupt_labels(clean, T, seed=i)
        worst_entry = max(worst_entry, float(np.abs(empirical_transition(noisy).rows - T.rows).max()))
        worst_frac = max(worst_frac, abs(noisy.corrupted_fraction() - eps))
    seconds = time.perf_counter() - t
    verdict(acceptance_report, 2, "noise generator fidelity",
            worst_entry < 0.02 and worst_frac <= 0.01 and seconds < 30,
            f"max entry deviation {worst_entry:.4f} (< 0.02), max fraction error {worst_frac:.4f} "
            f"(<= 0.01), {seconds:.1f} s of 30 s")


# ----------------------------------------------------------------- 3

def _ema_closed_form(rng):
    net = small_net(0)
    teacher = TeacherState(net.copy(requires_grad=False), 0.9)
    start = {k: v.copy() for k, v in teacher.params.arrays().items()}
    students, decays = [], [0.9, 0.5, 0.99, 0.0, 0.7]
    for d in decays:
        s = small_net(0)
        for a in s.arrays().values():
            a[...] = rng.normal(size=a.shape)
        students.append(s.arrays())
        ema_update(teacher, s, d)
    err = 0.0
    for k, got in teacher.params.arrays().items():
        want = start[k] * np.prod(decays)
        for j, d in enumerate(decays):
            want = want + (1 - d) * np.prod(decays[j + 1:]) * students[j][k]
        err = max(err, float(np.abs(got - want).max()))
    return err


def test_criterion_3_mechanism_equivalences(acceptance_report):
    rng = np.random.default_rng(3)
    img = rng.normal(size=(3, 7, 5))
    r = img
    for _ in range(4):
        r = rotate90(r, 1)
    rot_ok = r.tobytes() == img.tobytes()

    swa, snaps = SWAState(), []
    for _ in range(7):
        s = small_net(0)
        for a in s.arrays().values():
            a[...] = rng.normal(size=a.shape)
        snaps.append({k: v.copy() for k, v in s.arrays().items()})
        swa_capture(swa, s)
    swa_err = max(float(np.abs(a - np.mean([sn[k] for sn in snaps], axis=0)).max())
                  for k, a in swa.averaged_params.arrays().items())

    ema_err = _ema_closed_form(rng)

    clip_err = 0.0
    for scale in (1e-3, 0.5, 1.0, 7.0, 1e4):
        grads = [scale * rng.normal(size=(4, 3)), scale * rng.normal(size=5)]
        n = global_norm(grads)
        clip_err = max(clip_err, abs(global_norm(clip_gradients(grads, 3.0)) - min(n, 3.0)))

    ds, test = small_data()
    w = micro_config().weights
    cfg = micro_config(rotation=False, weights=LossWeights(w.omega_S, w.omega_C, Schedule("constant", 0.0)))
    res = run_training(cfg, ds, small_net(0, dropout=0.3), test)
    _, _, ref = _reference_mean_teacher(cfg, ds, small_net(0, dropout=0.3), test)
    mt_ok = [rec.test_acc_teacher for rec in res.log] == ref and len(ref) == 2

    ok = rot_ok and swa_err <= 1e-12 and ema_err <= 1e-12 and clip_err <= 1e-9 and mt_ok
    verdict(acceptance_report, 3, "mechanism equivalences", ok,
            f"rot90^4 identity {rot_ok}, SWA err {swa_err:.1e}, EMA err {ema_err:.1e}, "
            f"clip err {clip_err:.1e}, zero-rotation run equals plain MT {mt_ok}")


# ----------------------------------------------------------------- 4

def _dump(preset):
    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        assert cli.main(["schedule", "--config", preset, "--dump"]) == 0
    lines = out.getvalue().splitlines()
    tau = float(lines[0].split("=")[1])
    rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[2:]])
    return tau, rows


def test_criterion_4_schedule_contract(acceptance_report):
    expect_r = {"sym20": (0.0, 0.3), "sym50": (0.0, 0.3), "asym40": (0.0, 0.3), "sym80": (0.3, 0.5),
                "semi1k": (10.0, 10.0), "semi2k": (10.0, 10.0), "semi4k": (10.0, 10.0),
                "semi10k": (1.0, 1.0)}
    bad = []
    for name, (r0, r1) in expect_r.items():
        tau, rows = _dump(name)
        w_s, w_r = rows[:, 2], rows[:, 4]
        if tau != 3.0:
            bad.append(f"{name} tau {tau}")
        if w_r[0] != r0 or w_r.max() != r1 or w_r[-1] != r1:
            bad.append(f"{name} w_r {w_r[0]}..{w_r[-1]}")
        if name.startswith("semi") and not np.all(w_s == 1.0):
            bad.append(f"{name} w_s not constant 1")
        if name.startswith("semi") and not np.all(w_r == r0):
            bad.append(f"{name} w_r not constant")
    verdict(acceptance_report, 4, "schedule contract", not bad,
            "; ".join(bad) or f"{len(expect_r)} presets match, tau 3.0")


# ----------------------------------------------------------------- 5 and 6

@pytest.fixture(scope="module")
def sym80(cache):
    runs = {}
    for seed in SEEDS:
        for method, over in METHODS.items():
            runs[method, seed] = cache.get(("sym80", method, seed), tiny("sym80", seed, **over))
    return runs


def test_criterion_5_noisy_label_trend(sym80, acceptance_report):
    rows, ok_a, ok_b = [], True, True
    for seed in SEEDS:
        _, ce_last = best_last(sym80["CE", seed]["log"], "student")
        mt_best, mt_last = best_last(sym80["MT", seed]["log"], "teacher")
        rd_best, rd_last = best_last(sym80["RD-MT", seed]["log"], "teacher")
        ok_a &= rd_last >= ce_last + 10
        ok_b &= (rd_best - rd_last) <= (mt_best - mt_last) / 3
        rows.append(f"seed {seed}: CE last {ce_last:.1f}, MT {mt_best:.1f}/{mt_last:.1f}, "
                    f"RD-MT {rd_best:.1f}/{rd_last:.1f}")
    seconds = sum(r["seconds"] for r in sym80.values())
    ok_t = seconds < BUDGET_S
    verdict(acceptance_report, 5, "ShapeSet 80% symmetric trend", ok_a and ok_b and ok_t,
            f"(a) RD-MT last >= CE last + 10: {ok_a}; (b) RD-MT gap <= MT gap / 3: {ok_b}; "
            f"runtime {seconds:.0f} s of {BUDGET_S} s; " + "; ".join(rows))


def test_criterion_6_cleansing_audit(sym80, acceptance_report):
    pairs = [(sym80["RD-MT", s]["diag"], sym80["MT", s]["diag"]) for s in SEEDS]
    ok = all(rd > mt for rd, mt in pairs)
    verdict(acceptance_report, 6, "pseudo-label confusion diagonal", ok,
            "; ".join(f"seed {s}: RD-MT {rd:.2f} vs MT {mt:.2f}" for s, (rd, mt) in zip(SEEDS, pairs)))


# ----------------------------------------------------------------- 7 and 8

def semi(seed, labels, norm="group_ws", rotation=True):
    over = {"train.epochs": SEMI_EPOCHS, "weights.c.length": 0.3 * SEMI_EPOCHS,
            "noise.semi_sl.labels": labels, "model.norm": norm,
            "dataset.synthetic.clutter": SEMI_CLUTTER}
    if not rotation:
        over.update(MT)
    return tiny("semi1k", seed, **over)


def _error(run):
    return 100.0 - best_last(run["log"], "teacher")[1]


def test_criterion_7_semi_supervised_trend(cache, acceptance_report):
    err, seconds = {}, 0.0
    for seed in SEEDS:
        for labels in (120, 240):
            for method, rot in (("MT", False), ("RD-MT", True)):
                run = cache.get(("semi", method, labels, seed, "group_ws"), semi(seed, labels, rotation=rot))
                err[method, labels, seed] = _error(run)
                seconds += run["seconds"]
    lower = all(err["RD-MT", 120, s] < err["MT", 120, s] for s in SEEDS)
    drop = {m: np.mean([err[m, 120, s] - err[m, 240, s] for s in SEEDS]) for m in ("MT", "RD-MT")}
    smaller_drop = drop["RD-MT"] < drop["MT"]
    ok = lower and smaller_drop and seconds < BUDGET_S
    per_seed = "; ".join(f"seed {s}: L=120 MT {err['MT', 120, s]:.1f} RD-MT {err['RD-MT', 120, s]:.1f}, "
                         f"L=240 MT {err['MT', 240, s]:.1f} RD-MT {err['RD-MT', 240, s]:.1f}" for s in SEEDS)
    verdict(acceptance_report, 7, "Semi-SL trend", ok,
            f"RD-MT error below MT at L=120 in every seed: {lower}; mean degradation 240->120 "
            f"RD-MT {drop['RD-MT']:.1f} vs MT {drop['MT']:.1f}; runtime {seconds:.0f} s of {BUDGET_S} s; "
            f"{per_seed} ({SEMI_EPOCHS} epochs, clutter {SEMI_CLUTTER})")


def test_criterion_8_normalization_ablation(cache, acceptance_report):
    gain = {}
    for norm in ("batch", "group", "group_ws"):
        acc = {}
        for method, rot in (("MT", False), ("RD-MT", True)):
            run = cache.get(("semi", method, 120, 0, norm), semi(0, 120, norm, rot))
            acc[method] = best_last(run["log"], "teacher")[1]
        gain[norm] = acc["RD-MT"] - acc["MT"]
    ok = gain["group_ws"] > max(gain["batch"], gain["group"])
    verdict(acceptance_report, 8, "normalization ablation", ok,
            ", ".join(f"{k} gain {v:+.1f}" for k, v in gain.items()) + " (seed 0, L=120)")


# ----------------------------------------------------------------- 9

MICRO = ["--set", "dataset.synthetic.n_train=120", "--set", "dataset.synthetic.n_test=30",
         "--set", "train.epochs=2", "--set", "dataset.validation_fraction=0.05"]


def test_criterion_9_determinism_and_formats(tmp_path, acceptance_report):
    bodies = []
    for run in ("a", "b"):
        out = tmp_path / run
        code = cli.main(["train", "--config", "sym80", "--scale", "tiny", *MICRO, "--out", str(out)])
        assert code == 0
        bodies.append((out / "metrics.csv").read_bytes())
    csv_ok = bodies[0] == bodies[1]

    rng = np.random.default_rng(9)
    n = 5
    raw10 = serialize_cifar_records(rng.integers(0, 10, n), rng.integers(0, 256, (n, 3, 32, 32)), "cifar10")
    labels, pixels, _ = parse_cifar_records(raw10, "cifar10")
    ok10 = serialize_cifar_records(labels, pixels, "cifar10") == raw10
    raw100 = serialize_cifar_records(rng.integers(0, 100, n), rng.integers(0, 256, (n, 3, 32, 32)),
                                     "cifar100", rng.integers(0, 20, n))
    labels, pixels, coarse = parse_cifar_records(raw100, "cifar100")
    ok100 = serialize_cifar_records(labels, pixels, "cifar100", coarse) == raw100

    ck_ok = True
    for norm in ("batch", "group", "group_ws", "instance", "layer"):
        net = build_backbone(3, 7, NormalizationKind.parse(norm, 8), 0.0625, 0.5, 11)
        for a in net.arrays().values():
            a[...] = rng.normal(size=a.shape)
        path = tmp_path / f"{norm}.bin"
        save_checkpoint(path, net)
        back = load_checkpoint(path)
        ck_ok &= back.arrays().keys() == net.arrays().keys()
        ck_ok &= all(a.tobytes() == back.arrays()[k].tobytes() for k, a in net.arrays().items())

    verdict(acceptance_report, 9, "determinism and formats", csv_ok and ok10 and ok100 and ck_ok,
            f"metrics.csv identical {csv_ok}, CIFAR-10 round trip {ok10}, CIFAR-100 round trip {ok100}, "
            f"checkpoint round trip {ck_ok}")
