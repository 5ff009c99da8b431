"""Acceptance gate: one test per shipped claim, one printed PASS/FAIL line each.

Heavy experiment fixtures (the three canned recipes) are session-scoped and
run once; the per-criterion tests read their CSV outputs. Every line is also
appended to acceptance_report.txt in the repository root.

Known red: three gates state tolerances the shipped fixed-variance reverse
sampler cannot meet; each asserts its tolerance faithfully and fails honestly.
Criterion 3: per-message output-norm KS < 0.05 for all 16 messages. With
T=100 and beta=0.05 the reverse chain's output spread has a floor slightly
below the true channel's even for an ideal noise predictor, which puts the
best reachable KS for the inner constellation points just above the gate.
Criterion 4: the diffusion-trained codec holds the factor-2 band at 2-5 dB
but converges to a ~3x gap by 8 dB. The generated channel carries a small
conditional-mean bias (per-step prediction error compounded over the 50-step
replay, independent of denoiser width and learning-rate floor); the decision
boundary shift it induces is negligible where SER is ~1e-2 and dominant below
~1e-3. Extra alternation rounds flatten without closing the gap. The
model-aware monotonicity and adversarial 5 dB clauses pass.
Criterion 5: the same mechanism is larger over fading (the per-dimension
conditional is a scale mixture with ~3x the spread, and the sampler smears
its small-fade tail regardless of denoiser capacity), so the surrogate-trained
SER floors near 4e-3 and leaves the factor-3 band at 20-25 dB. The
monotonicity clause passes.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from e2ediff import autoencoder as ae
from e2ediff import diffusion as df
from e2ediff import evalstats as ev
from e2ediff import harness as hn
from e2ediff import numkit as nk
from e2ediff import trainer as tr
from e2ediff.channels import (QAM16, awgn_apply, ebn0_to_sigma, EbN0Spec,
                              qam16_awgn_ser_closed_form, qam16_awgn_ser_oracle)

REPORT = Path(__file__).resolve().parent.parent / "acceptance_report.txt"


@pytest.fixture(scope="session", autouse=True)
def _fresh_report():
    REPORT.write_text("")
    yield


def record(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line, flush=True)
    with open(REPORT, "a", encoding="ascii") as fh:
        fh.write(line + "\n")


# ---------------------------------------------------------------------------
# session-scoped experiment runs

@pytest.fixture(scope="session")
def fig2_run(tmp_path_factory):
    t0 = time.monotonic()
    out = hn.run_recipe(hn.get_recipe("fig2_awgn_qam16"),
                        tmp_path_factory.mktemp("fig2") / "run")
    return out, time.monotonic() - t0


@pytest.fixture(scope="session")
def fig3_run(tmp_path_factory):
    t0 = time.monotonic()
    out = hn.run_recipe(hn.get_recipe("fig3_awgn_e2e"),
                        tmp_path_factory.mktemp("fig3") / "run")
    return out, time.monotonic() - t0


@pytest.fixture(scope="session")
def fig4_run(tmp_path_factory):
    t0 = time.monotonic()
    out = hn.run_recipe(hn.get_recipe("fig4_rayleigh_e2e"),
                        tmp_path_factory.mktemp("fig4") / "run")
    return out, time.monotonic() - t0


def _read_ks(run_dir: Path) -> list[float]:
    lines = (run_dir / "fidelity.csv").read_text().splitlines()[1:]
    return [float(line.split(",")[1]) for line in lines]


# ---------------------------------------------------------------------------
# criterion 1: analytic gradients vs central finite differences, < 1 min

def _fd_param_check(net, x, gates, rng, step=1e-5):
    """Max relative error of analytic vs numeric grads over params/input/gates."""
    out, tape = nk.mlp_forward(net, x, gates=gates)
    g_out = rng.standard_normal(out.shape)
    res = nk.mlp_backward(net, tape, g_out)

    def loss():
        y, _ = nk.mlp_forward(net, x, gates=gates)
        return float(np.sum(y * g_out))

    worst = 0.0

    def fd_of(arr):
        num = np.zeros_like(arr)
        flat = arr.ravel()
        numf = num.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi = loss()
            flat[i] = keep - step
            lo = loss()
            flat[i] = keep
            numf[i] = (hi - lo) / (2.0 * step)
        return num

    for p, g in zip(net.params(), res.param_grads):
        num = fd_of(p)
        scale = np.maximum(np.abs(num), 1e-6)
        worst = max(worst, float(np.max(np.abs(g - num) / scale)))
    num = fd_of(x)
    scale = np.maximum(np.abs(num), 1e-6)
    worst = max(worst, float(np.max(np.abs(res.input_grad - num) / scale)))
    if gates is not None:
        for gate, gg in zip(gates, res.gate_grads):
            if gate is None:
                continue
            num = fd_of(gate)
            scale = np.maximum(np.abs(num), 1e-6)
            worst = max(worst, float(np.max(np.abs(gg - num) / scale)))
    return worst


def test_criterion_1_autodiff_matches_finite_differences():
    t0 = time.monotonic()
    rng = np.random.default_rng(20240501)
    cases = [
        ([3, 5, 5, 2], ["elu", "elu", "linear"], False),          # encoder stack
        ([2, 5, 5, 4], ["elu", "elu", "softmax"], False),         # decoder stack
        ([4, 6, 6, 6, 2], ["softplus"] * 3 + ["linear"], True),   # gated denoiser
        ([5, 6, 6, 3], ["relu", "relu", "linear"], False),        # generator stack
        ([6, 6, 6, 1], ["relu", "relu", "linear"], False),        # critic stack
    ]
    worst = 0.0
    for sizes, acts, gated in cases:
        net = nk.init_params(sizes, acts, rng)
        x = 0.7 * rng.standard_normal((4, sizes[0]))
        gates = None
        if gated:
            gates = [1.0 + 0.1 * rng.standard_normal((4, w))
                     for w in sizes[1:-1]] + [None]
        worst = max(worst, _fd_param_check(net, x, gates, rng))
    elapsed = time.monotonic() - t0
    ok = worst < 1e-4 and elapsed < 60.0
    record(1, ok, f"max relative gradient error {worst:.3e} (gate 1e-4), "
                  f"runtime {elapsed:.1f}s (limit 60s)")
    assert worst < 1e-4
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# criterion 2: forward-chain identities, < 2 min

def test_criterion_2_diffusion_identities():
    t0 = time.monotonic()
    sched = df.build_schedule(100, 0.05)
    n_samples = 100_000
    x0 = np.array([0.6, -1.1])
    base = np.tile(x0, (n_samples, 1))

    # (a) iterated single steps vs the closed-form jump, first/second moments
    rng = np.random.default_rng(77)
    snapshots = {}
    x = base.copy()
    for t in range(1, sched.T + 1):
        x = df.diffuse_step(x, t, sched, rng)
        if t in (1, 50, 100):
            snapshots[t] = x.copy()
    worst_sigma = 0.0
    for t, iterated in snapshots.items():
        closed, _ = df.diffuse_closed(base, t, sched, rng)
        for arr_a, arr_b in ((iterated, closed),):
            mean_gap = np.abs(arr_a.mean(axis=0) - arr_b.mean(axis=0))
            mean_se = np.sqrt(arr_a.var(axis=0) / n_samples
                              + arr_b.var(axis=0) / n_samples)
            worst_sigma = max(worst_sigma, float(np.max(mean_gap / mean_se)))
            var_gap = np.abs(arr_a.var(axis=0) - arr_b.var(axis=0))
            var_se = np.sqrt(2.0 / (n_samples - 1)) * np.sqrt(
                arr_a.var(axis=0) ** 2 + arr_b.var(axis=0) ** 2)
            worst_sigma = max(worst_sigma, float(np.max(var_gap / var_se)))

    # (b) reverse mean with the true noise equals the posterior mean
    rng = np.random.default_rng(78)
    worst_mu = 0.0
    for _ in range(1000):
        t = int(rng.integers(2, sched.T + 1))
        row = rng.standard_normal(3)
        z0 = rng.standard_normal(3)
        ab = sched.alpha_bar[t - 1]
        x_t = math.sqrt(ab) * row + math.sqrt(1.0 - ab) * z0
        a = sched.alpha[t - 1]
        mu_theta = (x_t - (1.0 - a) / math.sqrt(1.0 - ab) * z0) / math.sqrt(a)
        mu_q, _ = df.posterior_moments(x_t, row, t, sched)
        worst_mu = max(worst_mu, float(np.max(np.abs(mu_theta - mu_q))))

    elapsed = time.monotonic() - t0
    ok = worst_sigma < 3.0 and worst_mu < 1e-10 and elapsed < 120.0
    record(2, ok, f"moment gap {worst_sigma:.2f} MC standard errors (gate 3), "
                  f"reverse-mean identity {worst_mu:.2e} (gate 1e-10), "
                  f"runtime {elapsed:.1f}s (limit 120s)")
    assert worst_sigma < 3.0
    assert worst_mu < 1e-10
    assert elapsed < 120.0


# ---------------------------------------------------------------------------
# criterion 3: generated-channel fidelity around 16-QAM (expected red)

def test_criterion_3_fidelity_ks_under_gate(fig2_run):
    run_dir, elapsed = fig2_run
    ks = _read_ks(run_dir)
    worst = max(ks)
    n_over = sum(1 for v in ks if v >= 0.05)
    ok = worst < 0.05
    record(3, ok, f"per-message norm KS max {worst:.4f}, {n_over}/16 messages "
                  f"at or over the 0.05 gate; recipe runtime "
                  f"{elapsed / 60:.1f} min (target 30)")
    assert worst < 0.05, (
        "fixed-variance ancestral sampling cannot reach the true output "
        f"spread at this schedule; measured max KS {worst:.4f}")


# ---------------------------------------------------------------------------
# criterion 4: AWGN end-to-end curves

def test_criterion_4_awgn_e2e_curves(fig3_run):
    run_dir, elapsed = fig3_run
    ma = ev.read_ser_csv(run_dir / "ser_model_aware.csv")
    ddpm = ev.read_ser_csv(run_dir / "ser_ddpm.csv")
    wgan = ev.read_ser_csv(run_dir / "ser_wgan.csv")
    ma_ser, ddpm_ser, wgan_ser = ma.sers(), ddpm.sers(), wgan.sers()

    decreasing = bool(np.all(np.diff(ma_ser) < 0.0))
    ratios = ddpm_ser / ma_ser
    ddpm_ok = bool(np.all((ratios <= 2.0) & (ratios >= 0.5)))
    at5 = [r.ebn0_db for r in ma.rows].index(5.0)
    wgan_ratio = wgan_ser[at5] / ma_ser[at5]
    wgan_ok = 0.5 <= wgan_ratio <= 2.0

    ok = decreasing and ddpm_ok and wgan_ok
    record(4, ok,
           f"model-aware strictly decreasing over 2-8 dB: {decreasing}; "
           f"surrogate/target ratio range [{ratios.min():.2f}, {ratios.max():.2f}] "
           f"(gate [0.5, 2]); adversarial ratio at 5 dB {wgan_ratio:.2f}; "
           f"recipe runtime {elapsed / 60:.1f} min (target 60)")
    assert decreasing, f"model-aware SER not strictly decreasing: {ma_ser}"
    assert ddpm_ok, (
        "the generated channel's conditional-mean bias dominates the "
        f"low-SER tail; surrogate/target ratios {ratios}")
    assert wgan_ok, f"adversarially-trained SER ratio at 5 dB: {wgan_ratio:.2f}"


# ---------------------------------------------------------------------------
# criterion 5: Rayleigh end-to-end curves

def test_criterion_5_rayleigh_e2e_curves(fig4_run):
    run_dir, elapsed = fig4_run
    ma = ev.read_ser_csv(run_dir / "ser_model_aware.csv")
    ddpm = ev.read_ser_csv(run_dir / "ser_ddpm.csv")
    wgan = ev.read_ser_csv(run_dir / "ser_wgan.csv")

    ser, se = ddpm.sers(), ddpm.stderrs()
    rises = np.diff(ser)
    slack = 3.0 * np.sqrt(se[:-1] ** 2 + se[1:] ** 2)
    monotone = bool(np.all(rises <= slack))

    dbs = [r.ebn0_db for r in ma.rows]
    tail = [i for i, db in enumerate(dbs) if db >= 20.0]
    tail_ratios = ddpm.sers()[tail] / ma.sers()[tail]
    tail_ok = bool(np.all((tail_ratios <= 3.0) & (tail_ratios >= 1.0 / 3.0)))

    # reported observation, not a gate: where the adversarial curve leaves
    # the target by more than 2x
    wgan_ratios = wgan.sers() / ma.sers()
    diverged = [db for db, r in zip(dbs, wgan_ratios) if r > 2.0]
    note = (f"adversarial curve >2x target from {diverged[0]:.0f} dB"
            if diverged else "adversarial curve within 2x everywhere")

    ok = monotone and tail_ok
    record(5, ok,
           f"surrogate curve monotone within error bars: {monotone}; "
           f"20-25 dB surrogate/target ratio range "
           f"[{tail_ratios.min():.2f}, {tail_ratios.max():.2f}] (gate [1/3, 3]); "
           f"{note}; recipe runtime {elapsed / 60:.1f} min (target 90)")
    assert monotone, f"SER rises beyond error bars: {ser}"
    assert tail_ok, (
        "the sampler smears the small-fade tail and the codec's SER floors "
        f"near 4e-3; 20-25 dB ratios {tail_ratios}")


# ---------------------------------------------------------------------------
# criterion 6: negative control, untrained surrogate must fail the KS gate

def test_criterion_6_untrained_surrogate_fails_ks():
    cfg = hn.get_recipe("fig2_awgn_qam16").config
    den = df.make_denoiser(cfg.block_dim, cfg.n_messages, cfg.diffusion_t,
                           np.random.default_rng(987),
                           hidden=cfg.denoiser_hidden, depth=cfg.denoiser_depth)
    sched = df.build_schedule(cfg.diffusion_t, cfg.diffusion_beta)
    channel_fn = hn._real_channel_factory(cfg.channel, cfg.sigma_r)
    report = ev.channel_fidelity_report(
        hn._true_sampler(channel_fn, cfg.train_sigma),
        hn._ddpm_sampler(den, sched, cfg.reverse_noise),
        np.array(QAM16), 10_000, np.random.default_rng(988))
    worst = report.worst_ks()
    ok = worst > 0.2
    record(6, ok, f"untrained surrogate max norm KS {worst:.3f} "
                  f"(must exceed 0.2: test has power)")
    assert worst > 0.2


# ---------------------------------------------------------------------------
# criterion 7: reruns with the same master seed are byte-identical

def test_criterion_7_rerun_determinism(tmp_path_factory):
    t0 = time.monotonic()
    base = tmp_path_factory.mktemp("determinism")
    rec = hn.get_recipe("fig3_awgn_e2e", quick=True)
    dir_a = hn.run_recipe(rec, base / "a")
    dir_b = hn.run_recipe(rec, base / "b")
    names = sorted(p.name for p in dir_a.glob("*.csv"))
    mismatched = [n for n in names
                  if (dir_a / n).read_bytes() != (dir_b / n).read_bytes()]
    elapsed = time.monotonic() - t0
    ok = not mismatched and names and elapsed < 300.0
    record(7, ok, f"{len(names)} CSVs byte-identical across reruns"
                  + (f" (mismatch: {mismatched})" if mismatched else "")
                  + f", runtime {elapsed:.1f}s (limit 300s)")
    assert names, "reduced recipe produced no CSV outputs"
    assert not mismatched, f"non-deterministic outputs: {mismatched}"
    assert elapsed < 300.0


# ---------------------------------------------------------------------------
# criterion 8: Monte-Carlo 16-QAM simulator vs the closed form, < 1 min

def test_criterion_8_qam16_oracle_matches_closed_form():
    t0 = time.monotonic()
    rng = np.random.default_rng(31337)
    num = 400_000
    worst = 0.0
    details = []
    for db in (2.5, 5.0, 7.5):
        sigma = ebn0_to_sigma(EbN0Spec(db, 2.0))
        mc = qam16_awgn_ser_oracle(sigma, num, rng)
        exact = qam16_awgn_ser_closed_form(sigma)
        se = math.sqrt(max(exact * (1.0 - exact), 1e-12) / num)
        gap_sigma = abs(mc - exact) / se
        worst = max(worst, gap_sigma)
        details.append(f"{db}dB {gap_sigma:.2f}se")
    elapsed = time.monotonic() - t0
    ok = worst < 3.0 and elapsed < 60.0
    record(8, ok, f"simulator vs closed form gaps: {', '.join(details)} "
                  f"(gate 3 standard errors), runtime {elapsed:.1f}s (limit 60s)")
    assert worst < 3.0
    assert elapsed < 60.0
