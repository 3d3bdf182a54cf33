"""Acceptance criteria, one test per criterion.

Each test prints one `ACCEPTANCE <name>: PASS` line (run with -s to stream
them) and asserts its runtime budget.  The whole module runs on the toy
backbone with no pretrained weights and no frontend build.
"""

import base64
import io
import subprocess
import sys
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch
from PIL import Image

import carigen
from carigen.backbones import toy_backbone
from carigen.concepts import (
    BackboneMismatchError,
    ConceptKind,
    init_concept,
    load_concept,
    save_concept,
)
from carigen.diffusion import SampleConfig, masked_loss, sample
from carigen.editing import EditContext, EditSlot, Pathway, mix_concepts, update_target_input
from carigen.evaluation import EvalTuple, ToyProjectionEmbedder, edge_map, evaluate_suite
from carigen.text import encode_prompt
from carigen.training import (
    TrainableConcept,
    TrainConfig,
    draw_training_batch,
    finetune,
    total_loss,
)
from tests.conftest import image_to_pil, make_train_image

TRAIN_SEED = 3
SAMPLE_SEED = 42


@contextmanager
def criterion(name: str, budget_s: float):
    start = time.monotonic()
    yield
    elapsed = time.monotonic() - start
    assert elapsed < budget_s, f"{name} took {elapsed:.1f}s, budget {budget_s}s"
    print(f"ACCEPTANCE {name}: PASS ({elapsed:.2f}s < {budget_s:.0f}s)")


def random_context(rng, n_slots=1, zero_scale=False, zero_output=False):
    n = int(rng.integers(4, 24))
    d = int(rng.integers(4, 96))
    h = torch.tensor(rng.standard_normal((n, d)))
    t_p = torch.tensor(rng.standard_normal((n, d)))
    indices = rng.choice(n, size=n_slots, replace=False)
    slots = []
    for c in indices:
        o = np.zeros(d) if zero_output else rng.standard_normal(d)
        s = 0.0 if zero_scale else float(rng.uniform(0.2, 2.0))
        slots.append(
            EditSlot(int(c), torch.tensor(rng.standard_normal(d)), torch.tensor(o), s)
        )
    return EditContext(Pathway.KEY, 0, h, t_p, slots)


def test_edit_locality():
    with criterion("edit locality", 5.0):
        rng = np.random.default_rng(0)
        for i in range(1000):
            ctx = random_context(rng, zero_scale=(i % 10 == 8), zero_output=(i % 10 == 9))
            out = mix_concepts(ctx)
            slot = ctx.slots[0]
            keep = torch.ones(ctx.h.shape[0], dtype=torch.bool)
            keep[slot.c_i] = False
            assert torch.equal(out[keep], ctx.h[keep])
            gate = torch.dot(ctx.t_p[slot.c_i], slot.i_star) / (
                ctx.t_p[slot.c_i].norm() * slot.i_star.norm()
            )
            delta = slot.scale * gate * slot.o_star
            changed = not torch.equal(out[slot.c_i], ctx.h[slot.c_i])
            assert changed == bool((delta != 0).any())


def test_scale_linearity_and_zero_cases():
    with criterion("scale linearity", 5.0):
        rng = np.random.default_rng(1)
        for _ in range(200):
            ctx = random_context(rng)
            slot = ctx.slots[0]
            delta_1 = (
                mix_concepts(
                    EditContext(ctx.pathway, 0, ctx.h, ctx.t_p,
                                [EditSlot(slot.c_i, slot.i_star, slot.o_star, 1.0)])
                ) - ctx.h
            )[slot.c_i]
            for s in (0.5, 1.0, 2.0):
                out = mix_concepts(
                    EditContext(ctx.pathway, 0, ctx.h, ctx.t_p,
                                [EditSlot(slot.c_i, slot.i_star, slot.o_star, s)])
                )
                np.testing.assert_allclose(
                    (out - ctx.h)[slot.c_i].numpy(), (s * delta_1).numpy(), rtol=1e-6
                )
            zero_s = mix_concepts(
                EditContext(ctx.pathway, 0, ctx.h, ctx.t_p,
                            [EditSlot(slot.c_i, slot.i_star, slot.o_star, 0.0)])
            )
            assert torch.equal(zero_s, ctx.h)
            zero_o = mix_concepts(
                EditContext(ctx.pathway, 0, ctx.h, ctx.t_p,
                            [EditSlot(slot.c_i, slot.i_star, torch.zeros_like(slot.o_star), 1.3)])
            )
            assert torch.equal(zero_o, ctx.h)


def test_mixing_additivity():
    with criterion("mixing additivity", 5.0):
        rng = np.random.default_rng(2)
        for j in (1, 2, 3):
            for _ in range(100):
                ctx = random_context(rng, n_slots=j)
                combined = mix_concepts(ctx)
                total_delta = torch.zeros_like(ctx.h)
                for slot in ctx.slots:
                    single = mix_concepts(
                        EditContext(ctx.pathway, 0, ctx.h, ctx.t_p, [slot])
                    )
                    total_delta += single - ctx.h
                np.testing.assert_allclose(
                    combined.numpy(), (ctx.h + total_delta).numpy(), rtol=1e-6, atol=1e-9
                )
                if j == 2:
                    s1, s2 = ctx.slots
                    ab = mix_concepts(EditContext(ctx.pathway, 0,
                        mix_concepts(EditContext(ctx.pathway, 0, ctx.h, ctx.t_p, [s1])),
                        ctx.t_p, [s2]))
                    ba = mix_concepts(EditContext(ctx.pathway, 0,
                        mix_concepts(EditContext(ctx.pathway, 0, ctx.h, ctx.t_p, [s2])),
                        ctx.t_p, [s1]))
                    assert torch.equal(ab, ba)


def test_ema_behaviour():
    with criterion("EMA behaviour", 5.0):
        u = np.random.default_rng(3).standard_normal(32)
        i_star = np.zeros(32)
        checkpoints = {1, 10, 100}
        for k in range(1, 101):
            i_star = update_target_input(i_star, u, beta=0.98)
            if k in checkpoints:
                np.testing.assert_allclose(i_star, (1 - 0.98**k) * u, rtol=1e-6)
        # 500 random trials: cosine to the constant target never decreases
        rng = np.random.default_rng(4)
        targets = rng.standard_normal((500, 16))
        states = rng.standard_normal((500, 16))
        prev = np.full(500, -1.1)
        for _ in range(200):
            states = update_target_input(states, targets, beta=0.98)
            cos = (states * targets).sum(1) / (
                np.linalg.norm(states, axis=1) * np.linalg.norm(targets, axis=1)
            )
            assert (cos >= prev - 1e-12).all()
            prev = cos
        assert (prev > 0.99).all()


def test_masked_loss_criterion():
    with criterion("masked loss", 30.0):
        gen = torch.Generator().manual_seed(5)
        eps = torch.randn(2, 4, 12, 12, generator=gen, dtype=torch.float64)
        eps_hat = torch.randn(2, 4, 12, 12, generator=gen, dtype=torch.float64)
        mask = (torch.rand(12, 12, generator=gen) > 0.5).double()
        base = masked_loss(eps, eps_hat, mask).item()

        rng = np.random.default_rng(6)
        masked_cells = np.argwhere(mask.numpy() == 0)
        unmasked_cells = np.argwhere(mask.numpy() == 1)
        for cells, expect_change in ((masked_cells, False), (unmasked_cells, True)):
            picks = cells[rng.choice(len(cells), size=100, replace=True)]
            for y, x in picks:
                b = int(rng.integers(0, 2))
                c = int(rng.integers(0, 4))
                perturbed = eps_hat.clone()
                perturbed[b, c, y, x] += 0.37
                changed = masked_loss(eps, perturbed, mask).item() != base
                assert changed == expect_change

        grad_input = eps_hat.clone().requires_grad_(True)
        masked_loss(eps, grad_input, mask).backward()
        assert torch.all(grad_input.grad[:, :, mask == 0] == 0)

        full = masked_loss(eps, eps_hat, torch.ones(12, 12, dtype=torch.float64)).item()
        assert full == pytest.approx(torch.mean((eps - eps_hat) ** 2).item(), abs=1e-7)


@pytest.fixture(scope="module")
def bundle():
    """40-step paper-hyperparameter finetune on the toy backbone, seed-pinned."""
    backbone = toy_backbone(seed=0)
    image = make_train_image()
    config = TrainConfig(seed=TRAIN_SEED)  # batch 16, lrs 0.2 / 0.002, 40 id steps
    hash_before = backbone.weight_hash()
    start = time.monotonic()
    trained = finetune(image, "man", ConceptKind.IDENTITY, backbone, config)
    train_seconds = time.monotonic() - start
    return {
        "backbone": backbone,
        "image": image,
        "config": config,
        "trained": trained,
        "hash_before": hash_before,
        "train_seconds": train_seconds,
    }


def test_regularisers_criterion(bundle):
    with criterion("regularisers", 5.0):
        backbone = bundle["backbone"]
        state = TrainableConcept(init_concept("man", ConceptKind.IDENTITY, backbone))
        batch = draw_training_batch(
            bundle["image"], backbone, TrainConfig(batch_size=2), ConceptKind.IDENTITY,
            np.random.default_rng(0), torch.Generator().manual_seed(0),
        )
        _, parts = total_loss(batch, state, backbone, bundle["config"])
        assert parts.reg_w == 0.0
        assert parts.reg_t == 0.0

        bb64 = toy_backbone(seed=0, image_resolution=32, dtype=torch.float64)
        image64 = make_train_image(32).double()
        delta = 0.35
        state64 = TrainableConcept(
            init_concept("man", ConceptKind.IDENTITY, bb64), dtype=torch.float64
        )
        with torch.no_grad():
            state64.v_star[0] += delta
        batch64 = draw_training_batch(
            image64, bb64, TrainConfig(batch_size=2), ConceptKind.IDENTITY,
            np.random.default_rng(1), torch.Generator().manual_seed(1),
        )
        _, parts64 = total_loss(batch64, state64, bb64, TrainConfig(batch_size=2))
        assert parts64.reg_w == pytest.approx(delta**2, abs=1e-7)


def test_gradient_correctness():
    with criterion("gradient correctness", 120.0):
        backbone = toy_backbone(seed=0, image_resolution=32, dtype=torch.float64)
        image = make_train_image(32).double()
        config = TrainConfig(batch_size=2, seed=0)
        state = TrainableConcept(
            init_concept("man", ConceptKind.IDENTITY, backbone), dtype=torch.float64
        )
        jitter = torch.Generator().manual_seed(17)
        with torch.no_grad():  # move off the symmetric init point
            state.v_star += 0.05 * torch.randn(state.v_star.shape, generator=jitter, dtype=torch.float64)
            for o in (*state.o_key, *state.o_value):
                o += 0.05 * torch.randn(o.shape, generator=jitter, dtype=torch.float64)
        batch = draw_training_batch(
            image, backbone, config, ConceptKind.IDENTITY,
            np.random.default_rng(2), torch.Generator().manual_seed(2),
        )

        def loss_value():
            loss, _ = total_loss(batch, state, backbone, config)
            return loss

        loss = loss_value()
        loss.backward()
        rng = np.random.default_rng(7)
        step = 1e-5
        sampled_o = state.o_value[int(rng.integers(0, len(state.o_value)))]
        for param in (state.v_star, sampled_o):
            coords = rng.choice(param.shape[0], size=10, replace=False)
            for i in coords:
                with torch.no_grad():
                    original = param[i].item()
                    param[i] = original + step
                    plus = loss_value().item()
                    param[i] = original - step
                    minus = loss_value().item()
                    param[i] = original
                fd = (plus - minus) / (2 * step)
                assert param.grad[i].item() == pytest.approx(fd, rel=1e-3, abs=1e-9)


def test_frozen_backbone_and_parameter_budget(bundle):
    with criterion("frozen backbone + parameter budget", 180.0):
        backbone = bundle["backbone"]
        assert backbone.weight_hash() == bundle["hash_before"]
        assert sum(w.requires_grad for w in backbone.all_weights()) == 0
        trained = bundle["trained"]
        expected = backbone.embed_dim + sum(
            2 * layer.d_l for layer in backbone.cross_attention_layers
        )
        assert trained.parameter_count == expected == 576
        assert bundle["train_seconds"] < 150.0


def test_personalisation_sanity_oracle(bundle):
    with criterion("personalisation sanity oracle", 300.0):
        backbone = bundle["backbone"]
        image = bundle["image"]
        trained = bundle["trained"]
        config = bundle["config"]

        probe = draw_training_batch(
            image, backbone, config, ConceptKind.IDENTITY,
            np.random.default_rng(999), torch.Generator().manual_seed(999),
        )
        fresh = init_concept("man", ConceptKind.IDENTITY, backbone)
        with torch.no_grad():
            _, before = total_loss(probe, TrainableConcept(fresh), backbone, config)
            _, after = total_loss(probe, TrainableConcept(trained), backbone, config)
        assert after.masked <= 0.5 * before.masked, (before.masked, after.masked)

        # sample on the pure conditional branch (w=1: eps_hat == eps_c) so the
        # trained pathway is exactly what drives the trajectory
        uncond = encode_prompt("", {}, backbone)
        sample_cfg = SampleConfig(steps=50, cfg_scale=1.0, scale_overrides={"id": 1.2})
        pe_trained = encode_prompt("a photo of a [id*]", {"id": trained}, backbone)
        pe_fresh = encode_prompt("a photo of a [id*]", {"id": fresh}, backbone)
        result_trained = sample(backbone, pe_trained, uncond, None, sample_cfg, SAMPLE_SEED)
        result_fresh = sample(backbone, pe_fresh, uncond, None, sample_cfg, SAMPLE_SEED)
        with torch.no_grad():
            z_train = backbone.vae_encode(image)
        dist_trained = torch.linalg.vector_norm(result_trained.latent - z_train).item()
        dist_fresh = torch.linalg.vector_norm(result_fresh.latent - z_train).item()
        assert dist_trained < dist_fresh, (dist_trained, dist_fresh)


def test_end_to_end_determinism(tmp_path, bundle):
    with criterion("end-to-end determinism", 120.0):
        concept_path = tmp_path / "concept.dcc"
        save_concept(bundle["trained"], concept_path)
        sketch = np.zeros((64, 64), dtype=np.uint8)
        sketch[8:56, 32] = 255
        sketch_path = tmp_path / "sketch.png"
        Image.fromarray(sketch, mode="L").save(sketch_path)

        outputs = []
        for run in range(2):
            out = tmp_path / f"cli-{run}.png"
            proc = subprocess.run(
                [sys.executable, "-m", "carigen.cli", "generate",
                 "--id", str(concept_path), "--sketch", str(sketch_path),
                 "--scale", "1.2", "--steps", "50", "--cfg", "9", "--seed", "21",
                 "--out", str(out)],
                capture_output=True, text=True, timeout=90,
            )
            assert proc.returncode == 0, proc.stderr
            outputs.append(out.read_bytes())
        assert outputs[0] == outputs[1]

        from fastapi.testclient import TestClient

        from carigen.service import ServiceConfig, create_app

        service_config = ServiceConfig(storage_root=str(tmp_path / "service"))
        with TestClient(create_app(service_config)) as client:
            upload = client.post(
                "/concepts",
                files={"image": ("ref.png", _png(bundle["image"]), "image/png")},
                data={"superclass": "man", "kind": "identity", "steps": "2"},
            )
            concept_id = upload.json()["job_id"]
            _wait(client, concept_id)
            payload = {
                "concepts": [{"id": concept_id, "scale": 1.2}],
                "steps": 8,
                "seed": 13,
                "sketch_png_base64": base64.b64encode(sketch_path.read_bytes()).decode(),
            }
            job_ids = [client.post("/generate", json=payload).json()["job_id"] for _ in range(2)]
            for job_id in job_ids:
                _wait(client, job_id)
            first = client.get(f"/results/{job_ids[0]}").content
            second = client.get(f"/results/{job_ids[1]}").content
            assert first == second


def test_evaluation_pipeline(tmp_path):
    with criterion("evaluation pipeline", 30.0):
        embedder = ToyProjectionEmbedder()
        rng = np.random.default_rng(0)
        identity = tmp_path / "identity.png"
        image_to_pil(make_train_image(seed=11)).save(identity)
        sketch_arr = np.zeros((64, 64), dtype=np.uint8)
        sketch_arr[20, 4:60] = 255
        sketch = tmp_path / "sketch.png"
        Image.fromarray(sketch_arr, mode="L").save(sketch)

        score = carigen.embedding_score(str(identity), str(identity), embedder)
        assert score == pytest.approx(1.0, abs=1e-6)

        half = np.zeros((64, 64), dtype=np.float32)
        half[:, 32:] = 1.0
        edges = edge_map(half)
        ys, xs = np.nonzero(edges)
        assert (np.abs(xs - 31.5) <= 1.0).mean() >= 0.95

        caricature = tmp_path / "caricature.png"
        image_to_pil(make_train_image(seed=12)).save(caricature)
        tuples = [
            EvalTuple(identity=str(identity), sketch=str(sketch), caricature=str(caricature)),
            EvalTuple(identity=str(identity), sketch=str(sketch), caricature=str(identity)),
        ]
        report = evaluate_suite(tuples, embedder)
        recomputed = float(np.mean([r["id_score"] for r in report["rows"]]))
        assert report["means"]["id"] == pytest.approx(recomputed, abs=1e-12)


def test_concept_container(tmp_path, bundle):
    with criterion("concept container", 5.0):
        trained = bundle["trained"]
        path = tmp_path / "trained.dcc"
        save_concept(trained, path)
        loaded = load_concept(path, bundle["backbone"])
        assert loaded.v_star.tobytes() == trained.v_star.tobytes()
        assert loaded.i_star.tobytes() == trained.i_star.tobytes()
        for (a_k, a_v), (b_k, b_v) in zip(loaded.outputs, trained.outputs):
            assert a_k.tobytes() == b_k.tobytes()
            assert a_v.tobytes() == b_v.tobytes()
        other = toy_backbone(layer_dims=[64] * 6, seed=0, image_resolution=32)
        with pytest.raises(BackboneMismatchError):
            load_concept(path, other)


def _png(image_tensor) -> bytes:
    buf = io.BytesIO()
    image_to_pil(image_tensor).save(buf, format="PNG")
    return buf.getvalue()


def _wait(client, job_id, timeout=90.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        body = client.get(f"/jobs/{job_id}").json()
        if body["state"] == "done":
            return body
        if body["state"] == "failed":
            raise AssertionError(f"job failed: {body['error']}")
        time.sleep(0.02)
    raise TimeoutError(job_id)
