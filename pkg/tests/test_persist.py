import numpy as np
import pytest

from ctrkd import persist
from ctrkd.data import FeatureVocabulary, TableSchema, FieldSchema, CATEGORICAL
from ctrkd.models import FieldDims, Model, ModelSpec, spec_from_preset
from ctrkd.train import Adam

DIMS = FieldDims((6, 4, 5), 2)

ZOO = [
    ModelSpec.lr(),
    ModelSpec.fm(3),
    ModelSpec.dnn((8, 4), embedding_dim=3),
    ModelSpec.wide_deep((8,), embedding_dim=3),
    ModelSpec.deepfm((8,), embedding_dim=3),
    ModelSpec.dcn(2, (8,), embedding_dim=3),
    ModelSpec.xdeepfm((4,), (8,), embedding_dim=3),
]


def random_batch(n=100, seed=0):
    rng = np.random.default_rng(seed)
    cat = np.stack([rng.integers(0, v, size=n) for v in DIMS.vocab_sizes], axis=1)
    num = rng.normal(size=(n, DIMS.n_numeric))
    return cat, num


@pytest.mark.parametrize("spec", ZOO, ids=lambda s: s.wide + ("+mlp" if s.deep else ""))
def test_roundtrip_bitwise_predictions(tmp_path, spec):
    model = Model(spec, DIMS, seed=11)
    path = tmp_path / "model.ckpt"
    persist.save(path, model, seed=11, epoch=3, vocab_fingerprint="ab" * 32)
    loaded = persist.load(path)
    assert loaded.spec == spec
    assert loaded.seed == 11 and loaded.epoch == 3
    rebuilt = loaded.build_model()
    cat, num = random_batch()
    np.testing.assert_array_equal(rebuilt.logit_values(cat, num),
                                  model.logit_values(cat, num))


def test_deterministic_bytes(tmp_path):
    model = Model(ModelSpec.deepfm((8,), embedding_dim=3), DIMS, seed=2)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    persist.save(p1, model, seed=2, vocab_fingerprint="x")
    persist.save(p2, model, seed=2, vocab_fingerprint="x")
    assert p1.read_bytes() == p2.read_bytes()


def test_truncated_file_rejected(tmp_path):
    model = Model(ModelSpec.fm(3), DIMS, seed=0)
    path = tmp_path / "model.ckpt"
    persist.save(path, model)
    blob = path.read_bytes()
    for cut in (4, len(blob) // 2, len(blob) - 3):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(blob[:cut])
        with pytest.raises(persist.CorruptCheckpointError):
            persist.load(bad)


def test_not_a_checkpoint(tmp_path):
    path = tmp_path / "noise.ckpt"
    path.write_bytes(b"definitely not a checkpoint")
    with pytest.raises(persist.CorruptCheckpointError):
        persist.load(path)


def test_version_mismatch(tmp_path):
    model = Model(ModelSpec.lr(), DIMS, seed=0)
    path = tmp_path / "model.ckpt"
    persist.save(path, model)
    blob = bytearray(path.read_bytes())
    blob[8] = 99  # version field
    path.write_bytes(bytes(blob))
    with pytest.raises(persist.VersionMismatchError):
        persist.load(path)


def test_fingerprint_refusal(tmp_path):
    schema = TableSchema(0, [FieldSchema("a", CATEGORICAL, 1)])
    rows_a = [["0", "x"], ["1", "y"], ["0", "x"], ["1", "y"]]
    rows_b = [["0", "x"], ["1", "z"], ["0", "x"], ["1", "z"]]
    vocab_a = FeatureVocabulary.build(rows_a, schema, min_count=1)
    vocab_b = FeatureVocabulary.build(rows_b, schema, min_count=1)
    assert vocab_a.fingerprint() != vocab_b.fingerprint()

    model = Model(ModelSpec.lr(), FieldDims((3,), 0), seed=0)
    path = tmp_path / "model.ckpt"
    persist.save(path, model, vocab_fingerprint=vocab_a.fingerprint())
    loaded = persist.load(path)
    loaded.build_model(expected_fingerprint=vocab_a.fingerprint())  # same vocab fine
    with pytest.raises(persist.FingerprintMismatchError):
        loaded.build_model(expected_fingerprint=vocab_b.fingerprint())


def test_adam_state_roundtrip(tmp_path):
    model = Model(ModelSpec.dnn((6,), embedding_dim=3), DIMS, seed=5)
    opt = Adam(model.parameters(), lr=1e-3)
    cat, num = random_batch(8, seed=1)
    from ctrkd import distill as KD
    from ctrkd import tensor as T
    labels = np.random.default_rng(0).integers(0, 2, size=(8, 1)).astype(float)
    for _ in range(3):
        logit, _ = model.forward(cat, num)
        KD.bce_loss(labels, T.sigmoid(logit)).backward()
        opt.step()
    path = tmp_path / "model.ckpt"
    persist.save(path, model, adam=opt)
    loaded = persist.load(path)
    t, m, v = loaded.adam
    assert t == 3
    restored = Adam(loaded.build_model().parameters(), lr=1e-3)
    restored.load_state(t, m, v)
    np.testing.assert_array_equal(restored.m[0], opt.m[0])
    np.testing.assert_array_equal(restored.v[-1], opt.v[-1])


def test_extras_roundtrip(tmp_path):
    model = Model(ModelSpec.dnn((4,), embedding_dim=2), DIMS, seed=1)
    extras = {"gate.w.0": np.array([[1.5]]), "gate.b.0": np.array([[-0.25]])}
    path = tmp_path / "model.ckpt"
    persist.save(path, model, extras=extras)
    loaded = persist.load(path)
    np.testing.assert_array_equal(loaded.extras["gate.w.0"], extras["gate.w.0"])
    np.testing.assert_array_equal(loaded.extras["gate.b.0"], extras["gate.b.0"])
