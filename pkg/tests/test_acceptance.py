"""Acceptance suite: one test per exit criterion, each printing a PASS/FAIL
line (run with ``pytest tests/test_acceptance.py -v -s`` to see them live).
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

import mtplab.analytics as an
import mtplab.annotation_pipeline as ap
import mtplab.mtp_engine as eng
import mtplab.rvsa_attention as rv
from mtplab.tensorcore import Rng, Tensor
from mtplab.tensorcore import gradcheck as gc

ROOT = Path(__file__).parent.parent
FIXTURE = ROOT / "src" / "mtplab" / "data" / "schedule_fixture.json"
TOY_CONFIG = ROOT / "configs" / "toy_pretrain.json"


def report(name: str, ok: bool, detail: str = ""):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}"
    if detail:
        line += f"  ({detail})"
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------


def test_schedule_table_reproduction():
    """All 14 x 4 derived schedule cells match, including the half-rounding
    cases, in under a second."""
    t0 = time.perf_counter()
    rows = an.load_fixture(FIXTURE)
    table = an.reconcile_table(rows)
    elapsed = time.perf_counter() - t0
    by_name = {cfg.name: an.derive_row(cfg) for cfg, _ in rows}
    half_cases = (
        by_name["EuroSAT"].n_to_it == 25_312
        and by_name["RESISC-45"].n_to_it == 19_688
        and by_name["WHU"].n_to_it == 33_338
    )
    report(
        "schedule table reproduction",
        table.all_match and len(table.checks) == 56 and half_cases and elapsed < 1.0,
        f"{table.summary()}, {elapsed * 1000:.0f} ms",
    )


def test_gradient_suite():
    """Every registered differentiable op, the full attention layer, and all
    four loss families stay within 1e-4 of central differences over 10 seeds."""
    t0 = time.perf_counter()
    names = gc.case_names()
    required = {
        "rvsa_layer",
        "loss_semantic",
        "loss_rotated",
        "loss_instance_box",
        "loss_instance_mask",
    }
    assert required <= set(names)
    worst_name, worst = "", 0.0
    for name in names:
        for seed in range(10):
            err = gc.run_case(name, seed=seed, h=1e-5)
            if err > worst:
                worst_name, worst = f"{name}[seed {seed}]", err
    elapsed = time.perf_counter() - t0
    report(
        "gradient suite",
        worst <= 1e-4 and elapsed < 120.0,
        f"{len(names)} ops x 10 seeds, worst {worst:.2e} at {worst_name}, {elapsed:.1f} s",
    )


def test_identity_window_reduction():
    """Zero-initialized window-parameter weights reduce the layer to plain
    windowed attention bit-exactly on 100 random inputs."""
    ok = True
    for trial in range(100):
        rng = Rng(1000 + trial)
        x = Tensor._wrap(rng.normals((8, 4, 4)))
        w = rv.init_attention_weights(8, 2, rng.derive(1), "rvsa", init_scale=0.5)
        a = rv.rvsa_layer(x, w, heads=2, s=2)
        b = rv.plain_window_layer(x, w, heads=2, s=2)
        if not a.bitwise_equal(b):
            ok = False
            break
    report("identity-window reduction", ok, "100 random inputs, bit-exact")


def test_geometry_oracles():
    """Rasterization, horizontal-box extraction, and window sampling agree
    with independent brute-force oracles over 1000 random cases each."""
    rng = Rng(77)

    # rasterize vs per-pixel containment
    raster_ok = 0
    for _ in range(1000):
        H, W = rng.randint(4, 40), rng.randint(4, 40)
        box = ap.RotatedBox(
            rng.uniform_in(0, W - 1),
            rng.uniform_in(0, H - 1),
            rng.uniform_in(0.5, W * 0.7),
            rng.uniform_in(0.5, H * 0.7),
            ap.normalize_theta(rng.uniform_in(-math.pi / 2, math.pi / 2)),
            rng.randrange(5),
        )
        got = ap.rasterize_rbox(box, (H, W))
        ct, st = math.cos(box.theta), math.sin(box.theta)
        oracle = np.zeros((H, W), dtype=bool)
        for y in range(H):
            for x in range(W):
                dx, dy = x - box.cx, y - box.cy
                u = ct * dx - st * dy
                v = st * dx + ct * dy
                oracle[y, x] = abs(u) <= box.w / 2.0 and abs(v) <= box.h / 2.0
        raster_ok += int(np.array_equal(got, oracle))

    # min_hbox vs full scan
    hbox_ok = 0
    hbox_n = 0
    for _ in range(1000):
        H, W = rng.randint(4, 64), rng.randint(4, 64)
        mask = rng.uniforms((H, W)) < 0.12
        if not mask.any():
            continue
        hbox_n += 1
        got = ap.min_hbox(mask)
        xs, ys = [], []
        for y in range(H):
            for x in range(W):
                if mask[y, x]:
                    xs.append(x)
                    ys.append(y)
        hbox_ok += int(got == (min(xs), min(ys), max(xs), max(ys)))

    # sample_window vs per-point scalar bilinear
    def bilinear(feat, x, y):
        C, H, W = feat.shape
        x0, y0 = math.floor(x), math.floor(y)
        out = np.zeros(C)
        for dy in (0, 1):
            for dx in (0, 1):
                xx, yy = x0 + dx, y0 + dy
                wgt = (x - x0 if dx else 1 - (x - x0)) * (y - y0 if dy else 1 - (y - y0))
                if 0 <= xx < W and 0 <= yy < H:
                    out += wgt * feat[:, yy, xx]
        return out

    sample_ok = 0
    for _ in range(1000):
        feat = rng.normals((2, 8, 8))
        s = rng.randint(1, 3)
        corners = rv.WindowCorners.from_grid_cell(rng.randrange(2), rng.randrange(2), s)
        p = rv.WindowParams(
            1 + rng.uniform_in(-0.6, 0.6),
            1 + rng.uniform_in(-0.6, 0.6),
            rng.uniform_in(-3, 3),
            rng.uniform_in(-3, 3),
            rng.uniform_in(-math.pi, math.pi),
        )
        got = rv.sample_window(Tensor(feat), corners, p, s).data
        amap = rv.AffineWindowMap(corners.x_c, corners.y_c, p)
        worst = 0.0
        for i in range(s):
            for j in range(s):
                if s == 1:
                    rx = ry = 0.0
                else:
                    rx = corners.x_l + j * (corners.x_r - corners.x_l) / (s - 1) - corners.x_c
                    ry = corners.y_l + i * (corners.y_r - corners.y_l) / (s - 1) - corners.y_c
                x, y = amap.apply(rx, ry)
                worst = max(worst, np.max(np.abs(got[:, i, j] - bilinear(feat, x, y))))
        sample_ok += int(worst <= 1e-12)

    report(
        "geometry oracles",
        raster_ok == 1000 and hbox_ok == hbox_n and hbox_n > 900 and sample_ok == 1000,
        f"rasterize {raster_ok}/1000 exact, hbox {hbox_ok}/{hbox_n} exact, "
        f"sampling {sample_ok}/1000 within 1e-12",
    )


def test_layer_placement_presets():
    """Named presets put full attention and pyramid taps at the published
    layer indices."""
    b = rv.preset("vitb-rvsa")
    l = rv.preset("vitl-rvsa")
    kinds_b = b.layer_kinds()
    kinds_l = l.layer_kinds()
    ok = (
        b.full_attention_layers == (3, 6, 9, 12)
        and b.pyramid_layers == (4, 6, 8, 12)
        and l.full_attention_layers == (6, 12, 18, 24)
        and l.pyramid_layers == (8, 12, 16, 24)
        and [i + 1 for i, k in enumerate(kinds_b) if k == "full"] == [3, 6, 9, 12]
        and [i + 1 for i, k in enumerate(kinds_b) if k == "rvsa"]
        == [1, 2, 4, 5, 7, 8, 10, 11]
        and [i + 1 for i, k in enumerate(kinds_l) if k == "full"] == [6, 12, 18, 24]
        and (b.depth, b.embed_dim, b.heads) == (12, 768, 12)
        and (l.depth, l.embed_dim, l.heads) == (24, 1024, 16)
    )
    report("layer placement presets", ok, "base and large placements enumerated")


def test_toy_pretraining_convergence():
    """The documented toy run halves its total loss and is bit-deterministic."""
    with open(TOY_CONFIG, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    cfg = eng.parse_train_config(obj)
    assert cfg.preset_name == "toy" and cfg.iters == 300 and cfg.seed == 7
    assert cfg.backbone_config().depth == 4
    assert cfg.backbone_config().embed_dim == 32
    assert cfg.backbone_config().heads == 2
    assert cfg.backbone_config().window_size == 4
    assert all(s.synth.n_samples == 8 for s in cfg.streams)
    assert all((s.synth.height, s.synth.width) == (32, 32) for s in cfg.streams)

    t0 = time.perf_counter()
    res1 = eng.train_mtp(eng.load_streams(cfg), cfg)
    run_seconds = time.perf_counter() - t0
    res2 = eng.train_mtp(eng.load_streams(cfg), cfg)

    trace1 = eng.trace_to_csv(res1.trace)
    trace2 = eng.trace_to_csv(res2.trace)
    totals = [r.report.total for r in res1.trace]
    early = sum(totals[10:30]) / 20.0
    late = sum(totals[-20:]) / 20.0
    ratio = late / early
    report(
        "toy pretraining convergence",
        ratio <= 0.5 and trace1 == trace2 and run_seconds < 300.0,
        f"trailing/early loss ratio {ratio:.3f}, bit-identical traces, "
        f"{run_seconds:.1f} s per run",
    )


def test_schedule_checks():
    """Warmup start, cosine end, midpoint, and exact layer-decay scales."""
    st = eng.OptimState(
        base_lr=6e-5,
        weight_decay=0.05,
        layer_decay_rate=0.9,
        warmup_iters=100,
        warmup_init_lr=1e-6,
        total_iters=80_000,
        depth=12,
    )
    mid = st.warmup_iters + (st.total_iters - st.warmup_iters) // 2
    lr_ok = (
        eng.lr_at(0, st) == 1e-6
        and eng.lr_at(st.total_iters, st) == 0.0
        and abs(eng.lr_at(mid, st) - st.base_lr / 2) <= 1e-12
    )
    decay_ok = True
    for rate, depth in ((0.9, 12), (0.94, 24)):
        for i in range(1, depth + 2):
            if eng.layer_lr_scale(i, depth, rate) != rate ** (depth + 1 - i):
                decay_ok = False
    report("schedule checks", lr_ok and decay_ok, "warmup/cosine endpoints and decay scales exact")


def test_checkpoint_reuse_mechanics(tmp_path):
    """Backbone-only restore is bit-exact on backbone keys with fresh heads;
    with-decoders restore is a bit-exact round trip."""
    mc = eng.ModelConfig(
        backbone=rv.preset("toy"),
        patch_size=4,
        in_channels=3,
        image_hw=(32, 32),
        stream_classes=(4, 3, 5),
    )
    trained = eng.init_model(mc, Rng(5))
    path = tmp_path / "ckpt.tnsr"
    eng.checkpoint_io(path, "save", params=trained)

    fresh = eng.init_model(mc, Rng(123))
    full, rep_full = eng.checkpoint_io(path, "load-with-decoders", template=fresh)
    round_trip = all(full[k].bitwise_equal(trained[k]) for k in trained)

    backbone_only, rep_bb = eng.checkpoint_io(path, "load-backbone-only", template=fresh)
    bb_ok = all(
        backbone_only[k].bitwise_equal(trained[k])
        for k in trained
        if eng.is_backbone_key(k)
    )
    heads_fresh = all(
        backbone_only[k].bitwise_equal(fresh[k])
        for k in trained
        if not eng.is_backbone_key(k)
    )
    head_weights_differ = all(
        not backbone_only[k].bitwise_equal(trained[k])
        for k in trained
        if not eng.is_backbone_key(k) and k.endswith(".weight")
    )
    reported = set(rep_bb.restored) | set(rep_bb.unused_file_keys)
    nothing_silent = reported == set(trained)
    report(
        "checkpoint reuse mechanics",
        round_trip and bb_ok and heads_fresh and head_weights_differ and nothing_silent,
        f"{len(rep_full.restored)} keys round-trip, "
        f"{len(rep_bb.restored)} backbone restored / {len(rep_bb.reinitialized)} heads fresh",
    )
