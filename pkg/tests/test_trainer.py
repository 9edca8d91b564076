import copy
import logging
from pathlib import Path

import numpy as np
import pytest

from deblur_splat.blur import synth_blur_static
from conftest import TINY_SCRIPT
from deblur_splat.config import ABLATIONS, ablation_overrides
from deblur_splat.dataset import Dataset
from deblur_splat.errors import NumericError, StateError
from deblur_splat.lie import Pose
from deblur_splat.losses import TrackSet, full_l1, masked_l1
from deblur_splat.raster import render
from deblur_splat.scene import STATIC, Camera, Gaussians, logit
from deblur_splat.synth import SceneScript, ScriptedScene, generate
from deblur_splat.trainer import Trainer, frame_order, split_children


def with_true_poses(data, exposure=None):
    data = copy.deepcopy(data)
    for fr in data.frames:
        fr.initial_pose = fr.true_mid_pose
        if exposure is not None:
            fr.exposure = exposure
    return data


def test_frame_order_is_a_pinned_permutation():
    a = frame_order(3, 5, 10)
    assert sorted(a) == list(range(10))
    assert np.array_equal(a, frame_order(3, 5, 10))
    assert not np.array_equal(a, frame_order(3, 6, 10))


def test_masked_pixels_do_not_influence_stage1(make_config, tiny_dataset):
    cfg = make_config()
    other = copy.deepcopy(tiny_dataset)
    rng = np.random.default_rng(0)
    for fr in other.frames:
        fr.image[fr.mask] = rng.uniform(size=(fr.mask.sum(), 3))
    a, b = Trainer(cfg, tiny_dataset), Trainer(cfg, other)
    for i in range(len(tiny_dataset)):
        a.stage1_step(i)
        b.stage1_step(i)
    for k, v in a.state_arrays().items():
        assert np.array_equal(v, b.state_arrays()[k]), k


def test_stage1_with_true_poses_and_tiny_exposure_is_the_sharp_render_loss(make_config, tiny_dataset):
    data = with_true_poses(tiny_dataset, exposure=1e-9)
    t = Trainer(make_config(), data)
    t.delta_start[:] = 0.0
    t.delta_end[:] = 0.0
    i = 1
    fr = data[i]
    expect = masked_l1(render(t.gaussians, fr.true_mid_pose, t.cam, data.background), fr.image, fr.mask)[0]
    assert t.stage1_step(i)["l1"] == pytest.approx(expect, rel=1e-12)


def test_stage1_loss_decreases_on_the_toy_scene(make_config, tiny_dataset):
    cfg = make_config(**{"schedule.iters_stage1": 60, "schedule.iters_track_warmup_end": 61, "schedule.iters_total": 62})
    t = Trainer(cfg, tiny_dataset)
    losses = [t.step()["l1"] for _ in range(60)]
    assert all(np.isfinite(losses))
    windows = np.mean(np.reshape(losses, (3, 20)), axis=1)
    assert np.all(np.diff(windows) <= 0)


def test_stage_isolation_and_dynamic_init(make_config, tiny_dataset):
    cfg = make_config()
    t = Trainer(cfg, tiny_dataset)
    s1 = cfg.schedule.iters_stage1
    for _ in range(s1):
        t.step()
        assert not t.gaussians.is_dynamic.any() and t.fields["dynamic"] is None
    t.step()
    c = tiny_dataset[tiny_dataset.canonical_frame]
    s = tiny_dataset.track_stride
    expected = int(c.mask[::s, ::s].sum())
    assert expected > 0 and int(t.gaussians.is_dynamic.sum()) == expected


def test_dynamic_seeds_on_the_object_lie_in_its_bounding_box(make_config, tiny_dataset):
    data = with_true_poses(tiny_dataset)
    t = Trainer(make_config(), data)
    t.delta_start[:] = 0.0
    t.delta_end[:] = 0.0
    t.begin_stage2()
    script = SceneScript.from_dict(data.manifest["script"])
    scene = ScriptedScene(script)
    obj = scene.object_gaussians(0, data[data.canonical_frame].time)
    support = 3 * obj.scales.max()
    lo, hi = obj.means.min(axis=0) - support, obj.means.max(axis=0) + support
    pad = 0.05 * (hi - lo)
    owner = np.load(data.root / data.manifest["track_owner"])
    seeds = t.gaussians.means[t.gaussians.is_dynamic][owner >= 0]
    assert len(seeds) > 0
    assert np.all((seeds >= lo - pad) & (seeds <= hi + pad))


def test_empty_mask_gives_no_dynamic_gaussians(make_config, tiny_dataset, caplog):
    data = copy.deepcopy(tiny_dataset)
    for fr in data.frames:
        fr.mask[:] = False
    t = Trainer(make_config(), data)
    with caplog.at_level(logging.WARNING):
        t.begin_stage2()
    assert not t.gaussians.is_dynamic.any()
    assert "empty" in caplog.text


def test_stage2_reduces_to_static_blur_l1(make_config, tiny_dataset):
    cfg = make_config(lambda_track=0.0)
    t = Trainer(cfg, tiny_dataset)
    t.begin_stage2()
    t.iteration = cfg.schedule.iters_stage1
    i = 2
    start, end = t.trajectory(i).endpoints()
    union = t.gaussians.replace(tags=np.full(len(t.gaussians), STATIC))
    img = synth_blur_static(start, end, cfg.virtual_views - 1, union, t.cam, tiny_dataset.background)
    expect = full_l1(img, tiny_dataset[i].image)[0]
    assert t.stage2_step(i)["loss"] == pytest.approx(expect, rel=1e-9)


def test_broken_track_correspondence_is_a_state_error(make_config, tiny_dataset):
    cfg = make_config()
    t = Trainer(cfg, tiny_dataset)
    t.begin_stage2()
    t.iteration = cfg.schedule.iters_stage1
    t.track_refs = TrackSet(np.zeros((1, len(tiny_dataset), 3)), np.ones((1, len(tiny_dataset)), bool))
    with pytest.raises(StateError):
        t.stage2_step(0)


def test_densify_without_high_gradients_changes_nothing(make_config, tiny_dataset):
    t = Trainer(make_config(), tiny_dataset)
    before = t.gaussians.params()
    t.grad_accum[:] = 0.0
    assert t.densify_and_prune() == {"cloned": 0, "split": 0, "pruned": 0}
    for k, v in t.gaussians.params().items():
        assert np.array_equal(v, before[k])


def test_densify_prunes_everything_below_the_floor(make_config, tiny_dataset, caplog):
    t = Trainer(make_config(), tiny_dataset)
    t.gaussians.opacity_logits[:] = -20.0
    n = len(t.gaussians)
    with caplog.at_level(logging.WARNING):
        out = t.densify_and_prune()
    assert out["pruned"] == n and len(t.gaussians) == 0
    assert "left after pruning" in caplog.text


def test_split_roughly_conserves_the_rendered_image():
    cam = Camera(60, 60, 15.5, 15.5, 32, 32)
    g = Gaussians(
        means=np.array([[0.0, 0.0, 3.0]]),
        log_scales=np.log([[0.3, 0.2, 0.2]]),
        quats=np.array([[0.95, 0.1, 0.2, 0.0]]),
        opacity_logits=np.array([logit(0.7)]),
        colors=np.array([[0.9, 0.4, 0.1]]),
        tags=np.array([STATIC]),
    )
    before = render(g, Pose.identity(), cam)
    diffs = []
    for seed in range(20):
        kids = split_children(g, np.random.default_rng(seed))
        assert len(kids) == 2 and np.allclose(kids.scales, g.scales / 1.6)
        diffs.append(np.mean(np.abs(render(kids, Pose.identity(), cam) - before)))
    assert np.mean(diffs) < 0.05


def test_dynamic_count_is_constant_during_warmup(make_config, tiny_dataset):
    cfg = make_config(**{"densify.grad_threshold": 0.0, "densify.interval": 1, "densify.start": 1, "densify.static": False})
    t = Trainer(cfg, tiny_dataset)
    sch = cfg.schedule
    counts = []
    while t.iteration < sch.iters_total:
        rec = t.step()
        if sch.iters_stage1 <= rec["iter"] < sch.iters_track_warmup_end - 1:
            counts.append(rec["n_dynamic"])
    assert len(set(counts)) == 1
    assert t.gaussians.is_dynamic.sum() != counts[0]


def test_log_has_stage_transitions_at_configured_iterations(make_config, tiny_dataset, tmp_path):
    cfg = make_config()
    t = Trainer(cfg, tiny_dataset).train(log_path=tmp_path / "log.jsonl")
    events = [r for r in t.records if r.get("event") == "stage_transition"]
    assert [(e["iter"], e["to"]) for e in events] == [
        (cfg.schedule.iters_stage1, "stage2_warmup"),
        (cfg.schedule.iters_track_warmup_end, "stage2"),
    ]
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == len(t.records)


def test_resume_reproduces_the_uninterrupted_run(make_config, tiny_dataset, tmp_path):
    cfg = make_config()
    straight = Trainer(cfg, tiny_dataset).train()
    for cut in (3, 8):
        part = Trainer(cfg, tiny_dataset).train(until=cut)
        part.save_checkpoint(tmp_path / f"cut{cut}.ckpt")
        resumed = Trainer.from_checkpoint(tmp_path / f"cut{cut}.ckpt", tiny_dataset).train()
        ref = straight.state_arrays()
        got = resumed.state_arrays()
        assert sorted(ref) == sorted(got)
        for k in ref:
            assert np.array_equal(ref[k], got[k]), (cut, k)


def test_checkpoints_are_byte_identical_across_runs(make_config, tiny_dataset, tmp_path):
    cfg = make_config()
    Trainer(cfg, tiny_dataset).train().save_checkpoint(tmp_path / "a.ckpt")
    Trainer(cfg, tiny_dataset).train().save_checkpoint(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_evaluating_the_true_scene_reports_capped_psnr(make_config, tmp_path):
    d = dict(TINY_SCRIPT)
    d["objects"] = [{"radius": 0.3, "spacing": 0.1, "scale": 0.06, "trajectory": {"kind": "static", "center": [0.1, 0.0, 3.0]}}]
    script = SceneScript.from_dict(d)
    generate(script, tmp_path / "still")
    data = with_true_poses(Dataset(tmp_path / "still"))
    t = Trainer(make_config(), data)
    t.delta_start[:] = 0.0
    t.delta_end[:] = 0.0
    gt = ScriptedScene(script).at_time(0.0)
    t.gaussians = gt.replace(tags=np.full(len(gt), STATIC))
    report = t.evaluate()
    assert len(report["rows"]) == len(data)
    for row in report["rows"]:
        assert row["psnr"] == 99.0 and row["si_psnr"] >= row["psnr"]
    assert set(report["aggregate"]) == {"psnr", "ssim", "lv", "si_psnr", "si_ssim", "psnr_dynamic"}


def test_nan_loss_dumps_state_and_raises(make_config, tiny_dataset):
    cfg = make_config()
    t = Trainer(cfg, tiny_dataset)
    t.gaussians.colors[:] = np.nan
    with pytest.raises(NumericError):
        t.step()
    assert (Path(cfg.out_dir) / "nan_dump.ckpt").exists()


@pytest.mark.parametrize("name", sorted(ABLATIONS))
def test_every_ablation_runs(name, make_config, tiny_dataset):
    t = Trainer(make_config(**ablation_overrides(name)), tiny_dataset).train()
    assert t.iteration == t.cfg.schedule.iters_total
    assert np.isfinite(t.evaluate()["aggregate"]["psnr"])


def test_all_frame_track_term_is_the_mean_of_per_frame_terms(make_config, tiny_dataset):
    t_all = Trainer(make_config(track_frames="all"), tiny_dataset)
    t_all.begin_stage2()
    f = t_all.fields["dynamic"]
    rng = np.random.default_rng(0)
    for k in f.params:
        f.params[k] += rng.normal(0, 0.05, f.params[k].shape)
    t_cur = Trainer(make_config(), tiny_dataset)
    t_cur.gaussians, t_cur.fields, t_cur.track_refs = t_all.gaussians, t_all.fields, t_all.track_refs
    F = len(tiny_dataset)
    value, canonical, fgrads = t_all._track_term(0, 2.0)
    parts = [t_cur._track_term(i, 2.0 / F) for i in range(F)]
    assert value == pytest.approx(sum(p[0] for p in parts) / F, rel=1e-12)
    assert np.allclose(canonical.means, sum(p[1].means for p in parts), atol=1e-12)
    for k in fgrads:
        assert np.allclose(fgrads[k], sum(p[2][k] for p in parts), atol=1e-12)


def test_field_learning_rate_decays_after_warmup(make_config, tiny_dataset):
    cfg = make_config()
    t = Trainer(cfg, tiny_dataset)
    for it in (cfg.schedule.iters_stage1, cfg.schedule.iters_track_warmup_end):
        t.iteration = it
        assert t.lr_field() == pytest.approx(cfg.lr.field)
    t.iteration = cfg.schedule.iters_total
    assert t.lr_field() == pytest.approx(cfg.lr.field_final)
