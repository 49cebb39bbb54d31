import copy

import numpy as np
import pytest
import torch
from absl.testing import parameterized
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from causal_infomin import ate_d, netcore
from causal_infomin.ate_d import Autoencoder, ConfounderDictionary
from causal_infomin.baseline import BiasedModel, extract_features, split_logits
from causal_infomin.errors import CorruptFileError, InvalidInputError, UnsupportedVersionError
from causal_infomin.netcore import TrainConfig


class IdentityCodes:
  """Stands in for an autoencoder whose encoder is the identity map."""

  def enc(self, r):
    return r


def _weights(codes, centroids):
  return ate_d.confounder_weights(torch.as_tensor(codes, dtype=torch.float64), IdentityCodes(),
                                  ConfounderDictionary(np.asarray(centroids, dtype=np.float64)))


class RecalibrateTest(parameterized.TestCase):

  def testOrthogonalCodeKeepsFeature(self):
    r = np.array([[0.0, 0.0, 2.0], [0.0, 0.0, -1.0]])
    out = ate_d.recalibrate(r, IdentityCodes(), ConfounderDictionary(np.array([[1.0, 0.0, 0.0], [0.0, 3.0, 0.0]])))
    np.testing.assert_array_equal(out, r)

  def testCodeEqualToEveryCentroidZeroesFeature(self):
    r = np.array([[1.0, 2.0]])
    out = ate_d.recalibrate(r, IdentityCodes(), ConfounderDictionary(np.array([[1.0, 2.0], [2.0, 4.0]])))
    np.testing.assert_allclose(out, 0.0, atol=1e-15)

  def testHalfWeight(self):
    self.assertAlmostEqual(float(_weights([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]])[0]), 0.5, places=15)

  def testInvertIsTwoMinusW(self):
    codes = np.array([[1.0, 0.0], [0.3, -0.4]])
    cents = ConfounderDictionary(np.array([[1.0, 1.0], [0.0, 1.0]]))
    w = _weights(codes, cents.centroids).numpy()
    inv = ate_d.recalibrate(codes, IdentityCodes(), cents, invert=True)
    np.testing.assert_allclose(inv, (2 - w)[:, None] * codes, rtol=1e-15)

  def testTensorInAndSequenceShapes(self):
    r = torch.randn(5, 4, 3, generator=torch.Generator().manual_seed(0))
    out = ate_d.recalibrate(r, IdentityCodes(), ConfounderDictionary(np.eye(3)))
    self.assertIsInstance(out, torch.Tensor)
    self.assertEqual(tuple(out.shape), (5, 4, 3))


codes_and_centroids = st.tuples(st.integers(1, 6), st.integers(1, 5), st.integers(1, 8)).flatmap(
    lambda s: st.tuples(
        hnp.arrays(np.float64, (s[0], s[1]), elements=st.floats(-1e3, 1e3)),
        hnp.arrays(np.float64, (s[2], s[1]), elements=st.floats(-1e3, 1e3))))


@settings(max_examples=10_000)
@given(codes_and_centroids)
def test_weights_in_zero_two(data):
  codes, cents = data
  w = _weights(codes, cents).numpy()
  assert ((w >= 0.0) & (w <= 2.0)).all()


@settings(max_examples=500)
@given(codes_and_centroids)
def test_nonnegative_similarities_give_weights_in_zero_one(data):
  codes, cents = np.abs(data[0]), np.abs(data[1])
  w = _weights(codes, cents).numpy()
  assert ((w >= 0.0) & (w <= 1.0)).all()


@settings(max_examples=500)
@given(codes_and_centroids, st.floats(1e-3, 1e3))
def test_positive_centroid_scaling_leaves_weights_unchanged(data, alpha):
  codes, cents = data
  np.testing.assert_allclose(_weights(codes, alpha * cents).numpy(), _weights(codes, cents).numpy(), atol=1e-12)


class KmeansTest(parameterized.TestCase):

  def testSingleClusterIsMean(self):
    pts = np.random.default_rng(0).standard_normal((200, 3))
    centers, _ = ate_d.kmeans(pts, 1)
    np.testing.assert_allclose(centers[0], pts.mean(0), atol=1e-9)

  def testTwoBlobs(self):
    rng = np.random.default_rng(1)
    a = rng.normal(0.0, 0.2, (300, 2)) + [5.0, 5.0]
    b = rng.normal(0.0, 0.2, (300, 2)) + [-5.0, 0.0]
    centers, _ = ate_d.kmeans(np.concatenate([a, b]), 2, seed=3)
    centers = centers[np.argsort(centers[:, 0])]
    np.testing.assert_allclose(centers, [b.mean(0), a.mean(0)], atol=0.1)

  def testDeterministic(self):
    pts = np.random.default_rng(2).standard_normal((300, 4))
    np.testing.assert_array_equal(ate_d.kmeans(pts, 5, seed=7)[0], ate_d.kmeans(pts, 5, seed=7)[0])

  @parameterized.parameters(0, 4)
  def testInvalidK(self, k):
    pts = np.array([[0.0, 0.0], [1.0, 1.0], [1.0, 1.0], [2.0, 0.0]])  # 3 distinct points
    with self.assertRaises(InvalidInputError):
      ate_d.kmeans(pts, k)


class AutoencoderTest(parameterized.TestCase):

  def testConstantDataIsMemorized(self):
    c = np.linspace(-1.0, 1.0, 8)
    res = ate_d.train_autoencoder(np.tile(c, (256, 1)), TrainConfig(learning_rate=1e-2, epochs=60, seed=0))
    self.assertLessEqual(res.final_loss, 1e-3)

  def testFullWidthLatentNearlyReconstructs(self):
    x = np.random.default_rng(0).standard_normal((512, 6)) * 0.3
    res = ate_d.train_autoencoder(x, TrainConfig(learning_rate=1e-2, epochs=80, seed=0), latent_dim=6, hidden=12)
    self.assertLess(res.final_loss, 0.05 * res.initial_loss)

  def testLatentDimDefaultsToFactor(self):
    res = ate_d.train_autoencoder(np.zeros((16, 32)) + 0.1, TrainConfig(epochs=1))
    self.assertEqual(res.ae.latent_dim, 8)

  @parameterized.parameters(0, 9)
  def testLatentDimBounds(self, latent):
    with self.assertRaises(InvalidInputError):
      Autoencoder(8, latent)

  def testReconstructionLossGradient(self):
    ae = Autoencoder(5, 2, seed=1)
    r = torch.randn(8, 5, generator=torch.Generator().manual_seed(3))
    params = {n: p for n, p in ae.named_parameters()}
    self.assertLess(netcore.grad_check(lambda: ate_d.reconstruction_loss(ae, r), params).max_rel_error, 1e-4)


class DictionaryFileTest(parameterized.TestCase):

  def testRoundTrip(self):
    d = ConfounderDictionary(np.random.default_rng(0).standard_normal((10, 8)), iterations=12)
    data = ate_d.dictionary_to_bytes(d)
    back = ate_d.dictionary_from_bytes(data)
    self.assertEqual(back.centroids.tobytes(), d.centroids.tobytes())
    self.assertEqual(back.iterations, 12)
    self.assertEqual(ate_d.dictionary_to_bytes(back), data)

  @parameterized.named_parameters(
      ("truncated", lambda b: b[:-3], CorruptFileError), ("magic", lambda b: b"Y" + b[1:], CorruptFileError),
      ("version", lambda b: b.replace(b"format_version=1", b"format_version=2"), UnsupportedVersionError))
  def testCorrupt(self, mutate, error):
    data = ate_d.dictionary_to_bytes(ConfounderDictionary(np.eye(3)))
    with self.assertRaises(error):
      ate_d.dictionary_from_bytes(mutate(data))


@pytest.fixture(scope="module")
def fitted(small_baseline, small_bundle):
  model = BiasedModel.from_checkpoint(small_baseline)
  feats = extract_features(model, small_bundle.train).reshape(-1, model.shape.d_f)
  aer = ate_d.train_autoencoder(feats, TrainConfig(epochs=3, batch_size=256, seed=0))
  return model, aer, feats


def test_autoencoder_improves_on_biased_features(fitted):
  _, aer, _ = fitted
  assert aer.final_loss < aer.initial_loss


def test_dictionary_centroids_inside_code_bounding_box(fitted):
  _, aer, feats = fitted
  d = ate_d.build_dictionary(aer.ae, feats, K=10, seed=0)
  codes = ate_d.encode(aer.ae, feats)
  assert d.K == 10 and d.latent_dim == aer.ae.latent_dim
  assert np.isfinite(d.centroids).all()
  assert (d.centroids >= codes.min(0) - 1e-12).all() and (d.centroids <= codes.max(0) + 1e-12).all()
  np.testing.assert_array_equal(d.centroids, ate_d.build_dictionary(aer.ae, feats, K=10, seed=0).centroids)


def test_finetune_freezes_backbone_and_autoencoder(fitted, small_bundle):
  model, aer, feats = fitted
  d = ate_d.build_dictionary(aer.ae, feats, K=4)
  frozen_before = {k: v.clone() for k, v in model.state_dict().items() if not k.startswith("head")}
  ae_before = copy.deepcopy(aer.ae.state_dict())
  clf, ckpt = ate_d.finetune_recalibrated(model, aer.ae, d, small_bundle, TrainConfig(epochs=2, seed=0))
  for k, v in clf.model.state_dict().items():
    if not k.startswith("head"):
      assert torch.equal(v, frozen_before[k]), k
  for k, v in clf.ae.state_dict().items():
    assert torch.equal(v, ae_before[k]), k
  # the head did move, and the caller's model is untouched
  assert not torch.equal(clf.head.weights[0], model.head.weights[0])
  assert ckpt.metrics["trainable_params"] == netcore.count_params(model.head)


def test_checkpoint_reproduces_predictions(fitted, small_bundle):
  model, aer, feats = fitted
  d = ate_d.build_dictionary(aer.ae, feats, K=4)
  for invert in (False, True):
    clf, ckpt = ate_d.finetune_recalibrated(model, aer.ae, d, small_bundle, TrainConfig(epochs=1, seed=0), invert)
    back = ate_d.classifier_from_checkpoint(type(ckpt).from_bytes(ckpt.to_bytes()))
    assert back.invert == invert
    assert torch.equal(split_logits(clf, small_bundle.ood_test), split_logits(back, small_bundle.ood_test))


def test_orthogonal_dictionary_equals_plain_head_finetuning(small_baseline, small_bundle):
  model = BiasedModel.from_checkpoint(small_baseline)
  ae = Autoencoder(model.shape.d_f, 2, seed=0)
  with torch.no_grad():
    w, b = ae.enc.layers()[-1]
    w[1].zero_()
    b[1].zero_()
  # every code is (x, 0); the centroid (0, 1) is orthogonal to all of them, so w = 1 everywhere
  d = ConfounderDictionary(np.array([[0.0, 1.0]]))
  cfg = TrainConfig(epochs=3, seed=0)
  clf, ckpt = ate_d.finetune_recalibrated(model, ae, d, small_bundle, cfg)

  plain = BiasedModel.from_checkpoint(small_baseline)
  q, v, y = (torch.from_numpy(a) for a in (small_bundle.train.q, small_bundle.train.v, small_bundle.train.labels))
  with torch.no_grad():
    pooled = plain.pooled(q, v)
  g = torch.Generator().manual_seed(cfg.seed + 2)
  opt = netcore.make_optimizer(plain.head.parameters(), cfg)
  for _ in range(cfg.epochs):
    netcore.train_epoch(list(plain.head.parameters()), netcore.minibatch_indices(len(y), cfg.batch_size, g),
                        lambda i: netcore.softmax_cross_entropy(plain.head(pooled[i]), y[i]), cfg, opt)
  for split in ("id_test", "ood_test"):
    s = small_bundle.splits()[split]
    ref = netcore.accuracy_of(split_logits(plain, s), s.labels)
    assert abs(ckpt.metrics[f"{split}_acc"] - ref) <= 0.005
