"""Fusion model: coders, heads, joint loss, and the checkpoint codec."""
import numpy as np
import pytest

import fldkit.tensor as T
from fldkit.errors import (
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    ParameterError,
)
from fldkit.network import (
    FACE_DIM,
    Model,
    ModelConfig,
    joint_loss,
    load_model,
    save_model,
)

PANEL = ("BMI", "TG", "HPT", "HLP", "HDL", "WEIGHT", "DRINK", "MALE")


@pytest.fixture(scope="module")
def mm_model():
    model = Model.init(ModelConfig(mode="multimodal", indicators=PANEL), seed=11)
    rng = np.random.default_rng(0)
    meta = rng.normal(size=(32, 8)) * 3.0 + 1.0
    aux = rng.normal(size=(32, 3))
    model.fit_standardization(meta, aux)
    return model


def rand_batch(n=3, seed=1):
    rng = np.random.default_rng(seed)
    return rng.random((n, 64, 64, 3)), rng.normal(size=(n, 8)) * 3.0 + 1.0


class TestConfig:
    def test_mlp1_input_widths(self):
        assert ModelConfig(mode="metadata", indicators=PANEL).mlp1_input == 8
        assert ModelConfig(mode="image").mlp1_input == FACE_DIM
        assert ModelConfig(mode="multimodal", indicators=PANEL).mlp1_input == FACE_DIM + 8

    def test_aux_only_with_images(self):
        assert ModelConfig(mode="image").aux_active
        assert ModelConfig(mode="multimodal", indicators=PANEL).aux_active
        assert not ModelConfig(mode="metadata", indicators=PANEL).aux_active
        assert not ModelConfig(mode="indicator", indicators=PANEL).aux_active
        assert not ModelConfig(mode="image", use_aux=False).aux_active

    def test_validation(self):
        with pytest.raises(ConfigError):
            ModelConfig(mode="nope", indicators=PANEL)
        with pytest.raises(ConfigError):
            ModelConfig(mode="metadata", indicators=())
        with pytest.raises(ParameterError):
            ModelConfig(mode="metadata", indicators=PANEL, alpha=1.5)
        with pytest.raises(ParameterError):
            ModelConfig(mode="metadata", indicators=PANEL, dropout=1.0)
        with pytest.raises(ConfigError):
            ModelConfig(mode="metadata", indicators=("A", "A"))

    def test_round_trip(self):
        cfg = ModelConfig(mode="multimodal", indicators=PANEL, alpha=0.4, dropout=0.1)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestImageCoder:
    def test_zero_image_zero_biases_gives_zero_code(self, mm_model):
        z = mm_model.encode_image(np.zeros((2, 64, 64, 3)))
        assert np.array_equal(z.data, np.zeros((2, FACE_DIM)))

    def test_spatial_ladder(self, mm_model):
        x = T.Tensor(np.random.default_rng(2).random((1, 64, 64, 3)))
        sides = []
        for i in range(1, 6):
            x = T.conv2d(x, mm_model.params[f"conv{i}_w"], stride=2, padding=1)
            x = (x + mm_model.params[f"conv{i}_b"]).relu()
            sides.append(x.shape[1:3])
        assert sides == [(32, 32), (16, 16), (8, 8), (4, 4), (2, 2)]
        pooled = T.global_avg_pool(x)
        assert pooled.shape == (1, 1, 1, 128)

    def test_projection_follows_pooling(self, mm_model):
        # the 2048-dim code is linear in the pooled channel vector
        imgs, _ = rand_batch(1)
        code = mm_model.encode_image(imgs).data
        x = T.Tensor(imgs)
        for i in range(1, 6):
            x = T.conv2d(x, mm_model.params[f"conv{i}_w"], stride=2, padding=1)
            x = (x + mm_model.params[f"conv{i}_b"]).relu()
        pooled = T.global_avg_pool(x).data.reshape(1, 128)
        manual = pooled @ mm_model.params["proj_w"].data + mm_model.params["proj_b"].data
        assert np.allclose(code, manual, atol=1e-12)

    def test_distinct_faces_distinct_codes(self, mm_model):
        rng = np.random.default_rng(3)
        a = mm_model.encode_image(rng.random((1, 64, 64, 3))).data
        b = mm_model.encode_image(rng.random((1, 64, 64, 3))).data
        assert not np.allclose(a, b)

    def test_wrong_size_rejected(self, mm_model):
        with pytest.raises(DimensionError):
            mm_model.encode_image(np.zeros((1, 32, 32, 3)))
        with pytest.raises(DimensionError):
            mm_model.encode_image(np.zeros((64, 64, 3)))

    def test_smaller_image_size_config(self):
        model = Model.init(ModelConfig(mode="image", image_size=32), seed=0)
        code = model.encode_image(np.random.default_rng(1).random((2, 32, 32, 3)))
        assert code.shape == (2, FACE_DIM)


class TestMetadataCoder:
    def test_standardization(self, mm_model):
        mu = mm_model.stats["meta_mean"]
        sd = mm_model.stats["meta_sd"]
        z = mm_model.encode_metadata(mu[None, :])
        assert np.allclose(z.data, 0.0, atol=1e-12)
        z1 = mm_model.encode_metadata((mu + sd)[None, :])
        assert np.allclose(z1.data, 1.0, atol=1e-12)

    def test_width_mismatch(self, mm_model):
        with pytest.raises(DimensionError):
            mm_model.encode_metadata(np.zeros((2, 5)))

    def test_sd_floor_for_constant_column(self):
        model = Model.init(ModelConfig(mode="metadata", indicators=("A", "B")), seed=0)
        rows = np.column_stack([np.full(10, 7.0), np.arange(10.0)])
        model.fit_standardization(rows, None)
        z = model.encode_metadata(rows)
        assert np.all(np.isfinite(z.data))
        assert np.allclose(z.data[:, 0], 0.0)


class TestForward:
    def test_zero_params_give_half(self, mm_model):
        model = Model.init(ModelConfig(mode="multimodal", indicators=PANEL), seed=0)
        for p in model.params.values():
            p.data[:] = 0.0
        imgs, meta = rand_batch(3)
        out = model.forward(images=imgs, meta_rows=meta)
        assert np.array_equal(out.y_fat.data, np.full(3, 0.5))

    def test_output_in_open_interval(self, mm_model):
        imgs, meta = rand_batch(5)
        out = mm_model.forward(images=imgs, meta_rows=meta)
        assert np.all(out.y_fat.data > 0.0) and np.all(out.y_fat.data < 1.0)
        assert out.y_fat.shape == (5,)
        assert out.y_aux.shape == (5, 3)
        assert out.fusion.shape == (5, FACE_DIM + 8)

    def test_eval_is_deterministic(self, mm_model):
        imgs, meta = rand_batch(2)
        a = mm_model.forward(images=imgs, meta_rows=meta).y_fat.data
        b = mm_model.forward(images=imgs, meta_rows=meta).y_fat.data
        assert np.array_equal(a, b)

    def test_train_dropout_differs_from_eval(self, mm_model):
        imgs, meta = rand_batch(2)
        ev = mm_model.forward(images=imgs, meta_rows=meta).y_fat.data
        tr = mm_model.forward(images=imgs, meta_rows=meta, train=True,
                              rng=np.random.default_rng(0)).y_fat.data
        assert not np.array_equal(ev, tr)

    def test_fusion_face_first(self, mm_model):
        imgs, meta = rand_batch(2)
        out = mm_model.forward(images=imgs, meta_rows=meta)
        assert np.array_equal(out.fusion.data[:, :FACE_DIM], out.face_coding.data)
        assert np.array_equal(out.fusion.data[:, FACE_DIM:], out.metadata_coding.data)

    def test_aux_head_sees_only_the_face_code(self, mm_model):
        imgs, meta = rand_batch(4)
        a = mm_model.forward(images=imgs, meta_rows=meta)
        b = mm_model.forward(images=imgs, meta_rows=meta + 50.0)
        assert np.array_equal(a.y_aux.data, b.y_aux.data)
        assert not np.array_equal(a.y_fat.data, b.y_fat.data)

    def test_missing_modality_rejected(self, mm_model):
        imgs, meta = rand_batch(1)
        with pytest.raises(DataError):
            mm_model.forward(images=imgs)
        with pytest.raises(DataError):
            mm_model.forward(meta_rows=meta)

    def test_predict_scores_matches_forward(self, mm_model):
        imgs, meta = rand_batch(7)
        whole = mm_model.forward(images=imgs, meta_rows=meta).y_fat.data
        # same batching -> bit-identical
        assert np.array_equal(
            mm_model.predict_scores(images=imgs, meta_rows=meta, batch=7), whole
        )
        # different batching -> equal up to BLAS blocking noise
        batched = mm_model.predict_scores(images=imgs, meta_rows=meta, batch=3)
        assert np.allclose(batched, whole, rtol=0.0, atol=1e-12)

    def test_predict_rows_metadata_only(self, mm_model):
        with pytest.raises(ConfigError):
            mm_model.predict_rows(np.zeros((2, 8)))


class TestJointLoss:
    def test_bce_at_half_is_ln2(self):
        y = T.Tensor(np.full(4, 0.5))
        loss = joint_loss(y, np.array([1.0, 0.0, 1.0, 0.0]), None, None, alpha=1.0)
        assert abs(loss.item() - np.log(2.0)) < 1e-12

    def test_perfect_predictions_near_zero(self):
        y = T.Tensor(np.array([1.0, 0.0]))
        loss = joint_loss(y, np.array([1.0, 0.0]), None, None, alpha=1.0)
        assert 0.0 <= loss.item() < 1e-10

    def test_alpha_zero_is_pure_mse(self):
        y = T.Tensor(np.full(2, 0.5))
        aux = T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        target = np.zeros((2, 2))
        loss = joint_loss(y, np.array([1.0, 0.0]), aux, target, alpha=0.0)
        assert abs(loss.item() - np.mean([1, 4, 9, 16])) < 1e-12

    def test_blend(self):
        y = T.Tensor(np.full(1, 0.5))
        aux = T.Tensor(np.array([[2.0]]))
        bce = np.log(2.0)
        loss = joint_loss(y, np.array([1.0]), aux, np.zeros((1, 1)), alpha=0.7)
        assert abs(loss.item() - (0.7 * bce + 0.3 * 4.0)) < 1e-12

    def test_alpha_one_sends_zero_grad_to_aux(self):
        y = T.Tensor(np.full(2, 0.4), requires_grad=True)
        aux = T.Tensor(np.ones((2, 3)), requires_grad=True)
        loss = joint_loss(y, np.array([1.0, 0.0]), aux, np.zeros((2, 3)), alpha=1.0)
        loss.backward()
        assert aux.grad is not None and not aux.grad.any()
        assert y.grad.any()

    def test_bad_inputs(self):
        y = T.Tensor(np.full(2, 0.5))
        with pytest.raises(ParameterError):
            joint_loss(y, np.array([1.0, 0.0]), None, None, alpha=1.2)
        with pytest.raises(DataError):
            joint_loss(y, np.array([2.0, 0.0]), None, None, alpha=0.5)
        aux = T.Tensor(np.ones((2, 1)))
        with pytest.raises(DataError):
            joint_loss(y, np.array([1.0, 0.0]), aux, None, alpha=0.5)


class TestFullModelGradient:
    def test_finite_difference_on_every_tensor(self):
        """Joint loss on one sample; 64-coordinate subsample per tensor,
        central differences at eps=1e-5, relative error < 1e-4."""
        cfg = ModelConfig(mode="multimodal", indicators=("A", "B", "C"), dropout=0.0)
        model = Model.init(cfg, seed=5)
        rng = np.random.default_rng(6)
        meta = rng.normal(size=(12, 3))
        aux = rng.normal(size=(12, 3))
        model.fit_standardization(meta, aux)
        img = rng.random((1, 64, 64, 3))
        row = meta[:1]
        label = np.array([1.0])
        aux_t = model.standardize_aux(aux[:1])

        def loss_value():
            out = model.forward(images=img, meta_rows=row)
            return joint_loss(out.y_fat, label, out.y_aux, aux_t, alpha=0.7)

        loss = loss_value()
        for p in model.params.values():
            p.zero_grad()
        loss.backward()

        eps = 1e-5
        worst = 0.0
        coord_rng = np.random.default_rng(7)
        for name, p in model.params.items():
            flat = p.data.reshape(-1)
            gflat = p.grad.reshape(-1)
            k = min(64, flat.size)
            coords = coord_rng.choice(flat.size, size=k, replace=False)
            for c in coords:
                keep = flat[c]
                flat[c] = keep + eps
                up = loss_value().item()
                flat[c] = keep - eps
                down = loss_value().item()
                flat[c] = keep
                numeric = (up - down) / (2 * eps)
                analytic = gflat[c]
                rel = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
                worst = max(worst, rel)
        assert worst < 1e-4, f"max relative gradient error {worst:.3e}"


class TestCheckpoint:
    def test_round_trip_bit_identical(self, mm_model, tmp_path):
        path = tmp_path / "m.bin"
        save_model(mm_model, path)
        back = load_model(path)
        assert back.config == mm_model.config
        for k in mm_model.params:
            assert np.array_equal(back.params[k].data, mm_model.params[k].data)
        for k in mm_model.stats:
            assert np.array_equal(back.stats[k], mm_model.stats[k])
        imgs, meta = rand_batch(2)
        a = mm_model.forward(images=imgs, meta_rows=meta).y_fat.data
        b = back.forward(images=imgs, meta_rows=meta).y_fat.data
        assert np.array_equal(a, b)

    def test_save_twice_byte_identical(self, mm_model, tmp_path):
        save_model(mm_model, tmp_path / "a.bin")
        save_model(mm_model, tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
        assert (tmp_path / "a.bin.json").read_bytes() == (tmp_path / "b.bin.json").read_bytes()

    def test_corrupted_magic(self, mm_model, tmp_path):
        path = tmp_path / "m.bin"
        save_model(mm_model, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"ZZZZ"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="magic"):
            load_model(path)

    def test_truncated(self, mm_model, tmp_path):
        path = tmp_path / "m.bin"
        save_model(mm_model, path)
        path.write_bytes(path.read_bytes()[:-64])
        with pytest.raises(FormatError, match="truncat"):
            load_model(path)

    def test_missing_sidecar(self, mm_model, tmp_path):
        path = tmp_path / "m.bin"
        save_model(mm_model, path)
        (tmp_path / "m.bin.json").unlink()
        with pytest.raises(FormatError, match="sidecar"):
            load_model(path)

    def test_trailing_garbage(self, mm_model, tmp_path):
        path = tmp_path / "m.bin"
        save_model(mm_model, path)
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(FormatError, match="trailing"):
            load_model(path)

    def test_indicator_set_mismatch_names_mlp1(self, tmp_path):
        model = Model.init(ModelConfig(mode="multimodal", indicators=("A", "B")), seed=0)
        with pytest.raises(DimensionError, match="mlp1 input"):
            model.validate_for("multimodal", ("A", "B", "C"))

    def test_mode_mismatch(self):
        model = Model.init(ModelConfig(mode="metadata", indicators=("A",)), seed=0)
        with pytest.raises(DimensionError):
            model.validate_for("multimodal", ("A",))
