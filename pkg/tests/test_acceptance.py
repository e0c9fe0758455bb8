"""Acceptance suite: one test group per numbered criterion.

Each group records its verdict through ``conftest.criterion``; the terminal
summary prints one PASS/FAIL line per criterion. Run directly with
``python3 tests/test_acceptance.py`` or through pytest.
"""

import json
import time

import numpy as np
import pytest
import yaml

from sknas import superkernel as S
from sknas import tensor as T
from sknas.blocks import build_model, distill_model
from sknas.cli import main
from sknas.metrics import psnr, ssim
from sknas.superkernel import SliceGrid, StructuralWeights
from sknas.tensor import Rng, Tensor
from sknas.training import predict, self_ensemble

from conftest import criterion
from oracles import explicit_slice_sum, gradcheck
from support import OP_CASES, SEARCH_VARIANTS, make_sk, op_gradient_error, tiny_spec, wake_up


def randn(*shape, seed):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


def scramble_structure(model, seed):
    rng = np.random.default_rng(seed)
    for _, sk in model.superkernels():
        for _, p in sk.dist.parameters():
            p.data[...] = rng.normal(size=p.shape)


# ---------------------------------------------------------------------------
# 1. mask reparametrisation equals the explicit slice sum
# ---------------------------------------------------------------------------

def test_c1_masked_conv_equals_slice_sum():
    with criterion(1, "single masked conv == explicit slice sum (max abs diff < 1e-9, < 10 s)"):
        start = time.perf_counter()
        worst = 0.0
        for variant in ("joint", "factorized"):
            for seed in range(50):
                sk = make_sk(variant, in_ch=2, kernels=(1, 3), filters=(2, 3), seed=seed)
                x = randn(1, 2, 8, 8, seed=seed)
                w = sk.structural_weights(Rng(seed))
                got = S.forward_full(sk, x, weights=w).data
                worst = max(worst, float(np.max(np.abs(got - explicit_slice_sum(sk, x, w)))))
        for variant in ("filterwise", "filterwise-attention"):
            for filters in range(1, 5):
                for seed in range(5):
                    # the oracle enumerates every non-empty subset of the filters
                    sk = make_sk(variant, in_ch=2, kernels=(1, 3), filters=(filters,), seed=seed)
                    x = randn(1, 2, 8, 8, seed=seed)
                    w = sk.structural_weights(Rng(seed))
                    got = S.forward_full(sk, x, weights=w).data
                    worst = max(worst, float(np.max(np.abs(got - explicit_slice_sum(sk, x, w)))))
        elapsed = time.perf_counter() - start
        print(f"criterion 1: worst abs diff {worst:.2e}, {elapsed:.2f} s")
        assert worst < 1e-9, f"worst abs diff {worst:.2e}"
        assert elapsed < 10.0, f"took {elapsed:.1f} s"


# ---------------------------------------------------------------------------
# 2. gradients agree with central differences
# ---------------------------------------------------------------------------

def test_c2_gradients_match_finite_differences():
    with criterion(2, "finite-difference gradients (ops < 1e-5, toy model < 1e-4, < 60 s)"):
        start = time.perf_counter()
        op_errors = {name: op_gradient_error(name) for name in OP_CASES}
        worst_op = max(op_errors, key=op_errors.get)

        model_errors = {}
        for variant in ("none",) + SEARCH_VARIANTS:
            model = build_model(tiny_spec(), variant, Rng(1))
            wake_up(model, seed=2)
            scramble_structure(model, seed=3)
            x = randn(1, 1, 8, 8, seed=4)
            readout = randn(1, 1, 8, 8, seed=5)
            structural = [p for _, sk in model.superkernels() for _, p in sk.dist.parameters()]
            ids = {id(p) for p in structural}
            weights = [p for p in model.parameters() if id(p) not in ids]
            loss = lambda: T.sum_(model(x, Rng(6)) * readout)
            rng = np.random.default_rng(7)
            # every structural logit is checked; convolution weights are sampled
            err = gradcheck(loss, structural, rng, per_tensor=10**6) if structural else 0.0
            model_errors[variant] = max(err, gradcheck(loss, weights, rng, per_tensor=3))
        worst_model = max(model_errors, key=model_errors.get)
        elapsed = time.perf_counter() - start
        print(f"criterion 2: worst op {worst_op} {op_errors[worst_op]:.2e}, "
              f"worst model {worst_model} {model_errors[worst_model]:.2e}, {elapsed:.1f} s")
        assert op_errors[worst_op] < 1e-5, f"op {worst_op}: {op_errors[worst_op]:.2e}"
        assert model_errors[worst_model] < 1e-4, f"{worst_model}: {model_errors[worst_model]:.2e}"
        assert elapsed < 60.0, f"took {elapsed:.1f} s"


# ---------------------------------------------------------------------------
# 3. distillation consistency
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("variant", SEARCH_VARIANTS)
def test_c3_distilled_matches_hardened_supernet(variant):
    with criterion(3, "hardened supernet == distilled model on 20 inputs (< 1e-9); distill idempotent"):
        model = build_model(tiny_spec(in_channels=3, base_channels=8), variant, Rng(0), key_dim=4)
        wake_up(model, seed=1)
        scramble_structure(model, seed=2)
        _, arch = distill_model(model)
        choices = arch.choices()
        for path, sk in model.superkernels():
            sk.dist.harden(sk.grid, choices[path])
        small, arch_again = distill_model(model)
        assert arch_again == arch, "hardening to the distilled choice changed the architecture"
        rebuilt, _ = distill_model(model, arch)
        assert rebuilt.state_dict().keys() == small.state_dict().keys()
        assert all(np.array_equal(rebuilt.state_dict()[k], small.state_dict()[k]) for k in small.state_dict())
        worst = 0.0
        for i in range(20):
            x = randn(1, 3, 16, 16, seed=100 + i)
            worst = max(worst, float(np.max(np.abs(model(x, Rng(200 + i)).data - small(x).data))))
        assert worst < 1e-9, f"{variant}: worst abs diff {worst:.2e}"


# ---------------------------------------------------------------------------
# 4. separate vs full computation
# ---------------------------------------------------------------------------

def test_c4_separate_and_full_modes():
    with criterion(4, "identity activation: separate == full (< 1e-9); ReLU witness differs"):
        worst = 0.0
        for variant in ("joint", "factorized"):
            for seed in range(10):
                sk = make_sk(variant, seed=seed)
                x = randn(1, 2, 8, 8, seed=seed)
                w = sk.structural_weights(Rng(seed + 50))
                a = S.forward_separate(sk, x, None, weights=w).data
                b = S.forward_full(sk, x, weights=w).data
                worst = max(worst, float(np.max(np.abs(a - b))))
        assert worst < 1e-9, f"identity activation disagreement {worst:.2e}"

        # witness: the 1x1 slice sees a +1 centre tap, the 3x3 slice adds a ring of -1.
        # full: relu(0.5*1 + 0.5*(1 - 8)) = 0; separate: 0.5*relu(1) + 0.5*relu(-7) = 0.5
        grid = SliceGrid((1, 3), filter_counts=(1,))
        weight = -np.ones((1, 1, 3, 3))
        weight[0, 0, 1, 1] = 1.0
        sk = S.SuperKernel(Tensor(weight), None, grid, S.JointDistribution(grid))
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = StructuralWeights(pair=Tensor([[0.5], [0.5]]))
        full = T.relu(S.forward_full(sk, x, weights=w)).data[0, 0, 1, 1]
        separate = S.forward_separate(sk, x, T.relu, weights=w).data[0, 0, 1, 1]
        print(f"criterion 4: identity worst {worst:.2e}; ReLU witness full={full} separate={separate}")
        assert (full, separate) == (0.0, 0.5)


# ---------------------------------------------------------------------------
# 5 and 6. end-to-end toy search through the CLI
# ---------------------------------------------------------------------------

TOY_RUN = {
    "seed": 0,
    "search": {"variant": "joint", "mode": "full", "tau": 1.0},
    "data": {"count": 64, "size": 32, "noise_levels": [25 / 255], "test_count": 16, "test_seed": 1},
    "train": {"lr": 1e-3, "batch_size": 4, "patch_size": 32, "eval_interval": 100, "patience": 10,
              "max_steps": 1000},
    "finetune": {"lr": 5e-4, "batch_size": 4, "patch_size": 32, "eval_interval": 100, "patience": 10,
                 "max_steps": 500},
}


@pytest.fixture(scope="module")
def toy_compare(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    cfg = json.loads(json.dumps(TOY_RUN))
    cfg["data"]["dir"] = str(root / "data")
    cfg["out_dir"] = str(root / "run")
    path = root / "toy.yaml"
    path.write_text(yaml.safe_dump(cfg))
    start = time.perf_counter()
    assert main(["gen-data", "--config", str(path)]) == 0
    status = main(["compare", "--config", str(path), "--variants", "none", "joint"])
    elapsed = time.perf_counter() - start
    rows = json.loads((root / "run" / "compare.json").read_text()) if status == 0 else []
    return {"status": status, "rows": rows, "elapsed": elapsed, "run": root / "run"}


def _row(rows, variant, se):
    return next(r for r in rows if r["variant"] == variant and r["self_ensemble"] == se)


@pytest.mark.slow
def test_c5_toy_search_beats_noisy_input(toy_compare):
    with criterion(5, "toy joint search + finetune >= noisy PSNR + 2 dB (<= 3000 steps, < 15 min)"):
        assert toy_compare["status"] == 0, "compare run failed"
        rows = toy_compare["rows"]
        noisy, joint, base = _row(rows, "noisy input", False), _row(rows, "joint", False), _row(rows, "none", False)
        steps = 0
        for name in ("search_report.json", "finetune_report.json"):
            steps += json.loads((toy_compare["run"] / "joint" / name).read_text())["steps_run"]
        print(f"criterion 5: noisy {noisy['psnr']:.3f} dB, joint {joint['psnr']:.3f} dB, "
              f"baseline {base['psnr']:.3f} dB, joint steps {steps}, "
              f"both runs {toy_compare['elapsed']:.0f} s")
        assert steps <= 3000, f"{steps} optimisation steps"
        assert joint["psnr"] >= noisy["psnr"] + 2.0, f"joint {joint['psnr']:.3f} vs noisy {noisy['psnr']:.3f}"
        assert toy_compare["elapsed"] < 15 * 60, f"took {toy_compare['elapsed']:.0f} s"


class ChannelMix:
    """1x1 convolution: commutes with every rotation and flip of the image plane."""

    def __init__(self, seed=0):
        self.weight = Tensor(np.random.default_rng(seed).normal(size=(3, 3, 1, 1)))

    def __call__(self, x, rng=None):
        return T.conv2d(x, self.weight)


@pytest.mark.slow
def test_c6_self_ensemble(toy_compare):
    with criterion(6, "self-ensemble PSNR >= single - 0.1 dB; equivariant model unchanged (< 1e-9)"):
        assert toy_compare["status"] == 0, "compare run failed"
        for variant in ("none", "joint"):
            single = _row(toy_compare["rows"], variant, False)["psnr"]
            ensembled = _row(toy_compare["rows"], variant, True)["psnr"]
            print(f"criterion 6: {variant} single {single:.3f} dB, self-ensemble {ensembled:.3f} dB")
            assert ensembled >= single - 0.1, f"{variant}: {ensembled:.3f} < {single:.3f} - 0.1"
        img = np.random.default_rng(1).random((16, 16, 3))
        model = ChannelMix()
        gap = float(np.max(np.abs(self_ensemble(model, img) - predict(model, img))))
        assert gap < 1e-9, f"equivariant model changed by {gap:.2e}"


# ---------------------------------------------------------------------------
# 7. metrics
# ---------------------------------------------------------------------------

def test_c7_metric_cases():
    with criterion(7, "PSNR closed form 20.0 dB; SSIM(x, x) = 1; identical-image cap"):
        target = np.zeros((10, 10))
        pred = target.copy()
        pred[3, 4] = 1.0  # MSE = 1/100 exactly
        assert psnr(pred, target, peak=1.0) == 20.0
        img = np.random.default_rng(0).random((16, 16, 3))
        assert ssim(img, img) == 1.0
        assert psnr(img, img) == 100.0
        assert psnr(img, img + 1e-7) == 100.0  # MSE 1e-14 is under the cap threshold


# ---------------------------------------------------------------------------
# 8. determinism of the CLI
# ---------------------------------------------------------------------------

SMALL_RUN = {
    "seed": 7,
    "search": {"variant": "filterwise-attention"},
    "model": {"depth": 1, "base_channels": 4, "blocks_per_level": 1},
    "data": {"count": 8, "size": 16, "test_count": 2},
    "train": {"lr": 1e-3, "batch_size": 2, "patch_size": 8, "eval_interval": 3, "max_steps": 6},
    "finetune": {"lr": 5e-4, "batch_size": 2, "patch_size": 8, "eval_interval": 2, "max_steps": 4},
}


def _pipeline(cfg_path, run, data, force):
    extra = ["--force"] if force else []
    steps = [
        ["gen-data", "--config", cfg_path],
        ["search", "--config", cfg_path],
        ["distill", str(run / "search.ckpt")],
        ["finetune", "--config", cfg_path, str(run / "distilled.ckpt")],
        ["eval", str(run / "finetuned.ckpt"), "--data", str(data / "test"), "--self-ensemble"],
    ]
    for argv in steps:
        assert main(argv + extra) == 0, f"{argv[0]} failed"


def _snapshot(*dirs):
    return {str(p.relative_to(d.parent)): p.read_bytes() for d in dirs for p in sorted(d.rglob("*")) if p.is_file()}


def test_c8_cli_runs_are_byte_identical(tmp_path):
    with criterion(8, "two runs of one CLI config give byte-identical reports and checkpoints"):
        cfg = json.loads(json.dumps(SMALL_RUN))
        cfg["data"]["dir"] = str(tmp_path / "data")
        cfg["out_dir"] = str(tmp_path / "run")
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump(cfg))
        run, data = tmp_path / "run", tmp_path / "data"
        _pipeline(str(path), run, data, force=False)
        first = _snapshot(run, data)
        _pipeline(str(path), run, data, force=True)
        second = _snapshot(run, data)
        assert first.keys() == second.keys()
        differing = sorted(k for k in first if first[k] != second[k])
        assert not differing, f"differing files: {differing}"
        assert any(k.endswith(".ckpt") for k in first) and any(k.endswith(".json") for k in first)


# ---------------------------------------------------------------------------
# 9. sampling statistics
# ---------------------------------------------------------------------------

def test_c9_sampling_frequencies():
    with criterion(9, "hard GS frequencies within TV 0.01 of softmax; hard Bernoulli within 0.01 of sigmoid"):
        n = 100_000
        logits = np.array([0.7, -0.4, 1.3, 0.0, -1.1])
        hard = S.gumbel_softmax(Tensor(logits), 1.0, Rng(0), hard=True, sample_shape=(n,)).data
        freq = hard.mean(axis=0)
        probs = np.exp(logits) / np.exp(logits).sum()
        tv = 0.5 * float(np.abs(freq - probs).sum())

        bern_logits = np.array([-2.0, -0.5, 0.0, 0.8, 2.5])
        hits = S.relaxed_bernoulli(Tensor(bern_logits), 1.0, Rng(1), hard=True, sample_shape=(n,)).data
        gap = float(np.max(np.abs(hits.mean(axis=0) - 1.0 / (1.0 + np.exp(-bern_logits)))))
        print(f"criterion 9: GS total variation {tv:.4f}, Bernoulli max gap {gap:.4f}")
        assert tv < 0.01, f"total variation {tv:.4f}"
        assert gap < 0.01, f"Bernoulli frequency gap {gap:.4f}"


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
