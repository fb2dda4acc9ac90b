"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
lines as they complete. Criterion 7 trains the desk-scale denoiser for 2000
epochs on 16 synthetic pairs and takes the bulk of the runtime (well under
the 45-minute budget on a desktop CPU).
"""

import time

import numpy as np
import pytest

from sonomotion import audio as au
from sonomotion import diffusion as df
from sonomotion import evalsuite as ev
from sonomotion import skeleton as sk
from sonomotion.audio import FeatureConfig, NormalizationStats, extract_binaural
from sonomotion.dataset import SyntheticSceneSpec, synthesize_pair
from sonomotion.denoiser import (DenoiserConfig, MotionDenoiser, TrainConfig,
                                 TrainSample, sample_motion, train_denoiser)
from sonomotion.gradcheck import run_primitive_suite
from sonomotion.losses import LossWeights
from sonomotion.skeleton import Genre, SkeletonSpec, assemble_vector, normalize_sequence

SKEL = SkeletonSpec.default()


def report(criterion: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    print(f"[acceptance] {criterion}: {status}  {detail}")
    assert ok, f"{criterion}: {detail}"


# ---------------------------------------------------------------------------
# criterion 1: rotation roundtrip


def test_criterion_1_rotation_roundtrip():
    rng = np.random.default_rng(0)
    start = time.time()
    mats = np.empty((10_000, 3, 3))
    for i in range(10_000):
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        if np.linalg.det(q) < 0:
            q[:, 0] *= -1
        mats[i] = q
    build_time = time.time() - start
    start = time.time()
    err = np.abs(sk.sixd_to_matrix(sk.matrix_to_sixd(mats)) - mats).max()
    roundtrip_time = time.time() - start
    report("criterion 1 (6D roundtrip)", err < 1e-9 and roundtrip_time < 1.0,
           f"max err {err:.2e}, {roundtrip_time * 1e3:.0f} ms "
           f"(+{build_time:.1f}s building oracles)")


# ---------------------------------------------------------------------------
# criterion 2: FK oracle


def test_criterion_2_fk_oracle():
    chain = sk.SkeletonSpec(["root", "mid", "tip"], np.array([-1, 0, 1]),
                            np.array([[0, 0, 0], [1, 0, 0], [1, 0, 0.0]]),
                            left_foot=1, right_foot=2)
    rot = np.tile(np.eye(3), (3, 1, 1))
    rot[0] = sk.rotation_z(np.pi / 2)
    pos = sk.forward_kinematics(chain, np.zeros(3), rot)
    chain_err = max(np.abs(pos[1] - [0, 1, 0]).max(),
                    np.abs(pos[2] - [0, 2, 0]).max())

    rng = np.random.default_rng(1)
    rots = np.empty((SKEL.joint_count, 3, 3))
    for j in range(SKEL.joint_count):
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        if np.linalg.det(q) < 0:
            q[:, 0] *= -1
        rots[j] = q
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    base = sk.forward_kinematics(SKEL, np.zeros(3), rots)
    turned_rots = rots.copy()
    turned_rots[0] = q @ rots[0]
    turned = sk.forward_kinematics(SKEL, np.zeros(3), turned_rots)
    equiv_err = np.abs(turned - base @ q.T).max()
    report("criterion 2 (FK oracle)", chain_err < 1e-9 and equiv_err < 1e-9,
           f"chain err {chain_err:.2e}, equivariance err {equiv_err:.2e}")


# ---------------------------------------------------------------------------
# criterion 3: DSP oracles


def _naive_dft(frame):
    n = frame.size
    k = np.arange(n // 2 + 1)
    return np.exp(-2j * np.pi * np.outer(k, np.arange(n)) / n) @ frame


def _naive_spectrogram(x, cfg):
    frames = au.frame_signal(x, cfg.fft_size, cfg.hop_length)
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(cfg.fft_size) / cfg.fft_size)
    return np.stack([_naive_dft(f * win) for f in frames])


def test_criterion_3_dsp_oracles():
    cfg = FeatureConfig()
    sr = cfg.sample_rate
    rng = np.random.default_rng(2)
    x = np.clip(0.4 * rng.standard_normal(sr), -1, 1)    # 1 s fixture

    naive_spec = _naive_spectrogram(x, cfg)
    fast_spec = au.stft(x, cfg)
    stft_err = np.abs(fast_spec - naive_spec).max()

    # MFCC via the naive spectrogram and an independently coded mel/log/DCT
    def naive_mel_bank():
        def hz_to_mel(f):
            return 2595.0 * np.log10(1.0 + f / 700.0)

        def mel_to_hz(m):
            return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

        freqs = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate / cfg.fft_size
        edges = mel_to_hz(np.linspace(hz_to_mel(0.0),
                                      hz_to_mel(cfg.sample_rate / 2.0),
                                      cfg.mel_bands + 2))
        bank = np.zeros((cfg.mel_bands, freqs.size))
        for m in range(cfg.mel_bands):
            lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
            for i, f in enumerate(freqs):
                if lo <= f <= mid and mid > lo:
                    bank[m, i] = (f - lo) / (mid - lo)
                elif mid < f <= hi and hi > mid:
                    bank[m, i] = (hi - f) / (hi - mid)
        return bank

    def naive_mfcc(spec):
        power = np.abs(spec) ** 2
        logmel = np.log(np.maximum(power @ naive_mel_bank().T, 1e-10))
        n = logmel.shape[1]
        basis = np.cos(np.pi * np.outer(np.arange(n), (np.arange(n) + 0.5)) / n)
        scale = np.full(n, np.sqrt(2.0 / n))
        scale[0] = np.sqrt(1.0 / n)
        return (scale[:, None] * basis @ logmel.T).T[:, :cfg.mfcc_count]

    mfcc_fast = au.mfcc_with_delta(fast_spec, cfg)[:, :20]
    mfcc_err = np.abs(mfcc_fast - naive_mfcc(naive_spec)).max()

    chroma_fast = au.stft_chroma(fast_spec, cfg)
    chroma_err = np.abs(chroma_fast - au.stft_chroma(naive_spec, cfg)).max()
    cq_err = np.abs(au.cq_chroma(fast_spec, cfg)
                    - au.cq_chroma(naive_spec, cfg)).max()

    amp = 0.7
    t = np.arange(sr) / sr
    rms = au.energy_features(amp * np.sin(2 * np.pi * 440 * t), cfg)[1:-1, 0]
    rms_rel = np.abs(rms - amp / np.sqrt(2)).max() / (amp / np.sqrt(2))

    below = au.energy_features(np.full(sr, 0.0099), cfg)[:, 1]
    above = au.energy_features(np.full(sr, 0.0101), cfg)[:, 1]
    threshold_ok = (below == 0).all() and (above == 1).all()

    widths_ok = au.PER_EAR_WIDTH == 1136 and au.FEATURE_WIDTH == 2272
    ok = (stft_err < 1e-6 and mfcc_err < 1e-6 and chroma_err < 1e-6
          and cq_err < 1e-6 and rms_rel < 0.01 and threshold_ok and widths_ok)
    report("criterion 3 (DSP oracles)", ok,
           f"stft {stft_err:.1e}, mfcc {mfcc_err:.1e}, chroma {chroma_err:.1e}/"
           f"{cq_err:.1e}, rms rel {rms_rel:.4f}, threshold {threshold_ok}, "
           f"widths {widths_ok}")


# ---------------------------------------------------------------------------
# criterion 4: schedule and diffusion


def test_criterion_4_schedule_and_diffusion():
    sched = df.cosine_schedule(1000)
    monotone = bool(np.all(np.diff(sched.alpha_bars) < 0))
    ends_ok = sched.alpha_bars[0] == 1.0 and sched.alpha_bars[1000] < 1e-3

    rng = np.random.default_rng(3)
    t = 350
    x0 = np.full((100_000, 2), 0.9)
    xt = df.q_sample(x0, t, rng.standard_normal(x0.shape), sched)
    want_mean = np.sqrt(sched.alpha_bars[t]) * 0.9
    want_std = np.sqrt(1 - sched.alpha_bars[t])
    mean_rel = abs(xt.mean() - want_mean) / abs(want_mean)
    std_rel = abs(xt.std() - want_std) / want_std

    x_true = np.random.default_rng(4).standard_normal((8, 40))
    recon = df.sample_array(lambda x, tt: x_true, x_true.shape, sched,
                            np.random.default_rng(5))
    rmse = float(np.sqrt(np.mean((recon - x_true) ** 2)))

    ok = monotone and ends_ok and mean_rel < 0.01 and std_rel < 0.01 \
        and rmse < 0.05
    report("criterion 4 (schedule & diffusion)", ok,
           f"abar_1000 {sched.alpha_bars[1000]:.1e}, moments "
           f"{mean_rel:.4f}/{std_rel:.4f}, oracle RMSE {rmse:.2e}")


# ---------------------------------------------------------------------------
# criterion 5: gradients


def test_criterion_5_gradients():
    start = time.time()
    rows = run_primitive_suite(seed=0)
    worst_primitive = max(r.max_rel_error for r in rows)

    cfg = DenoiserConfig(latent=16, heads=2, layers=1, ff_mult=2,
                         audio_width=12, ssl_width=3, max_frames=4)
    rng = np.random.default_rng(6)
    model = MotionDenoiser(cfg, rng)
    irng = np.random.default_rng(7)
    x = irng.standard_normal((1, 3, 300))
    a = irng.standard_normal((1, 3, 12))
    s = irng.standard_normal((1, 3, 3))
    w = irng.standard_normal((1, 3, 300))
    from sonomotion import autodiff as ad
    from sonomotion.autodiff import Tape
    with Tape() as tape:
        out = model.predict_x0(x, np.array([3]), a, s, np.array([1]))
        loss = ad.sum_(ad.mul(out, w))
        tape.backward(loss)

    def scalar():
        return float(np.sum(
            model.predict_x0(x, np.array([3]), a, s, np.array([1])).data * w))

    # rel tolerance 1e-4 with a small absolute floor for near-zero entries
    # (central differences of an O(10) scalar carry ~1e-10 cancellation noise)
    prng = np.random.default_rng(8)
    worst_model = 0.0
    params = model.named_parameters()
    for name, tensor in params:
        flat = tensor.data.reshape(-1)
        gflat = tensor.grad.reshape(-1)
        for idx in prng.choice(flat.size, size=min(2, flat.size), replace=False):
            orig, step = flat[idx], 1e-5
            flat[idx] = orig + step
            hi = scalar()
            flat[idx] = orig - step
            lo = scalar()
            flat[idx] = orig
            num = (hi - lo) / (2 * step)
            ratio = abs(gflat[idx] - num) / (1e-7 + 1e-4 * abs(num))
            worst_model = max(worst_model, ratio)
    elapsed = time.time() - start
    ok = worst_primitive < 1e-4 and worst_model < 1.0 and elapsed < 300
    report("criterion 5 (gradients)", ok,
           f"primitive {worst_primitive:.1e}, end-to-end worst "
           f"{worst_model:.3f}x of (1e-7 + 1e-4|g|), {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 6: metric oracles


def test_criterion_6_metric_oracles():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((600, 10))
    fid_self = ev.fid(x, x)

    k, n, d = 8, 10_000, 1.3
    a = rng.standard_normal((n, k))
    b = rng.standard_normal((n, k))
    b[:, 0] += d
    fid_two = ev.fid(a, b)
    fid_rel = abs(fid_two - d * d) / (d * d)

    L, off = 16, 0.45
    m0 = np.zeros((L, 7))
    m1 = m0.copy()
    m1[:, 3] = off
    apd_val = ev.apd(np.stack([m0, m1]))
    apd_exact = apd_val == pytest.approx(off * np.sqrt(L), rel=1e-12)

    same = np.tile(rng.standard_normal(12), (200, 1))
    div_val, _ = ev.diversity(same, subset_size=64,
                              rng=np.random.default_rng(10))

    cond = rng.standard_normal((250, 16))
    mot = rng.standard_normal((250, 16))
    rp = ev.r_precision(cond, mot, pool_size=32, resamples=40,
                        rng=np.random.default_rng(11))    # 10_000 trials
    chance_err = abs(rp["top1"] - 1.0 / 32.0)

    ok = (fid_self < 1e-6 and fid_rel < 0.02 and apd_exact and div_val == 0.0
          and chance_err < 0.02)
    report("criterion 6 (metric oracles)", ok,
           f"fid(X,X) {fid_self:.1e}, two-gaussian rel {fid_rel:.4f}, "
           f"apd exact {apd_exact}, diversity {div_val}, "
           f"chance err {chance_err:.4f}")


# ---------------------------------------------------------------------------
# criterion 7 + 8: end-to-end overfit and the lambda schedule


OVERFIT_EPOCHS = 2000


def _build_pairs():
    walk_az = [0.0, 25.0, -20.0, 40.0]
    flee_az = [175.0, -165.0, 155.0, -175.0]
    dists = [2.5, 3.0, 2.8, 3.2]
    signals = ["tone", "chirp", "noise", "clicks"]
    bases = []
    for i in range(4):
        bases.append(dict(azimuth_deg=walk_az[i], distance=dists[i],
                          program="walk_toward", signal=signals[i],
                          seed=100 + i))
    for i in range(4):
        bases.append(dict(azimuth_deg=flee_az[i], distance=dists[i],
                          program="flee", signal=signals[(i + 1) % 4],
                          seed=104 + i))
    scenes = []
    for base in bases:
        for genre in (Genre.DULL, Genre.SENSITIVE):
            spec = SyntheticSceneSpec(duration=2.0, genre=genre, **base)
            scenes.append((spec, synthesize_pair(spec, SKEL)))
    return scenes


def _prepare(scenes):
    feat_cfg = FeatureConfig()
    raw = []
    items = []
    for spec, sc in scenes:
        norm, ssl_local = normalize_sequence(sc.motion, sc.ssl.positions)
        feats = extract_binaural(sc.clip, feat_cfg, norm.frames)
        raw.append(feats)
        items.append([assemble_vector(norm), feats.values,
                      ssl_local.positions, int(spec.genre), sc.meta])
    stats = NormalizationStats.fit(raw)
    for it in items:
        it[1] = stats.apply(it[1])
    return items


def _onset_time(p, thresh=0.05):
    disp = np.linalg.norm(p[:, :2] - p[0, :2], axis=1)
    idx = int(np.argmax(disp > thresh))
    return idx / 30.0 if disp[idx] > thresh else np.inf


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("accept7")
    scenes = _build_pairs()
    items = _prepare(scenes)
    model = MotionDenoiser(DenoiserConfig(latent=64, heads=4, layers=2,
                                          max_frames=60),
                           np.random.default_rng(0))
    sched = df.cosine_schedule(50)
    samples = [TrainSample(x0, a, s, g) for x0, a, s, g, _ in items]
    cfg = TrainConfig(epochs=OVERFIT_EPOCHS, batch_size=8, lr=3e-4, seed=0,
                      out_dir=str(out_dir))
    start = time.time()
    curves = train_denoiser(model, sched, samples, SKEL, cfg,
                            weights=LossWeights.with_schedule(OVERFIT_EPOCHS))
    train_minutes = (time.time() - start) / 60.0

    rng = np.random.default_rng(1)
    results = []
    for x0, a, s, g, meta in items:
        m = sample_motion(model, sched, a, s, g, rng, fps=30.0,
                          recompute_velocity=False)
        results.append((m, x0, s, g, meta))
    return dict(curves=curves, results=results, out_dir=out_dir,
                train_minutes=train_minutes)


def test_criterion_7a_overfit_rmse(overfit_run):
    rmses = [float(np.sqrt(np.mean((m.p - x0[:, :75]) ** 2)))
             for m, x0, _, _, _ in overfit_run["results"]]
    minutes = overfit_run["train_minutes"]
    ok = max(rmses) < 0.15 and minutes <= 45.0
    report("criterion 7a (overfit RMSE)", ok,
           f"max {max(rmses):.3f} m, mean {np.mean(rmses):.3f} m, "
           f"train {minutes:.1f} min")


def test_criterion_7b_hemisphere(overfit_run):
    correct = total = 0
    for m, _, s, _, meta in overfit_run["results"]:
        expected = meta["expected_direction"]
        if not expected:
            continue
        total += 1
        src = s[0, :2]
        src = src / np.linalg.norm(src)
        disp = m.p[-1, :2] - m.p[0, :2]
        if float(np.dot(disp, src)) * expected > 0:
            correct += 1
    ok = total == 16 and correct >= int(np.ceil(0.9 * total))
    report("criterion 7b (hemisphere)", ok, f"{correct}/{total} correct")


def test_criterion_7c_genre_onset(overfit_run):
    onsets = {}
    for m, _, _, _, meta in overfit_run["results"]:
        key = (meta["azimuth_deg"], meta["program"])
        onsets.setdefault(key, {})[meta["genre"]] = _onset_time(m.p)
    wins, margins = 0, []
    for key, per_genre in sorted(onsets.items()):
        margin = per_genre["dull"] - per_genre["sensitive"]
        margins.append(margin)
        wins += margin > 0
    # sampling is stochastic at desk scale: allow one miss among the eight
    # matched pairs but require a clearly positive mean margin
    ok = wins >= 7 and float(np.mean(margins)) > 0.2
    report("criterion 7c (genre onset)", ok,
           f"sensitive earlier on {wins}/8 pairs, "
           f"mean margin {np.mean(margins):.2f} s")


def test_criterion_8_lambda_schedule(overfit_run):
    bump = (5 * OVERFIT_EPOCHS) // 6
    curves = overfit_run["curves"]
    flips = (curves["lambda_traj"][bump - 1] == 1.0
             and curves["lambda_traj"][bump] == 3.0
             and curves["lambda_rot"][bump - 1] == 1.0
             and curves["lambda_rot"][bump] == 3.0)
    log_text = (overfit_run["out_dir"] / "metrics.log").read_text().splitlines()
    logged = ("lambda_traj=1 lambda_rot=1" in log_text[bump - 1]
              and "lambda_traj=3 lambda_rot=3" in log_text[bump])
    report("criterion 8 (lambda schedule)", flips and logged,
           f"flip at epoch {bump}: curves {flips}, log {logged}")
