#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>

#include "pcadv/checkpoint.hpp"
#include "pcadv/models.hpp"
#include "pcadv/pointcloud.hpp"

using namespace pcadv;
namespace fs = std::filesystem;

namespace {

AEConfig small_config(Index points = 64) {
  AEConfig c;
  c.latent = 16;
  c.points = points;
  c.seed = 3;
  return c;
}

Points shuffled(const Points& p, std::mt19937_64& rng) {
  std::vector<Index> order(static_cast<std::size_t>(p.rows()));
  for (Index i = 0; i < p.rows(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  Points out(p.rows(), 3);
  for (Index i = 0; i < p.rows(); ++i) out.row(i) = p.row(order[i]);
  return out;
}

Points select(const Points& p, const std::vector<Index>& ids) {
  Points out(static_cast<Index>(ids.size()), 3);
  for (std::size_t j = 0; j < ids.size(); ++j) out.row(static_cast<Index>(j)) = p.row(ids[j]);
  return out;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "pcadv_models";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& data) {
  std::ofstream(p, std::ios::binary).write(data.data(), static_cast<std::streamsize>(data.size()));
}

}  // namespace

TEST(Widths, DefaultFactorQuartersThePublishedWidths) {
  AEConfig c;
  EXPECT_EQ(encoder_widths(c), (std::vector<Index>{16, 32, 32, 64, 32}));
  EXPECT_EQ(decoder_widths(c), (std::vector<Index>{64, 64, 768}));
  c.width_factor = 1.0;
  c.latent = 128;
  c.points = 2048;
  EXPECT_EQ(encoder_widths(c), (std::vector<Index>{64, 128, 128, 256, 128}));
  EXPECT_EQ(decoder_widths(c), (std::vector<Index>{256, 256, 6144}));
}

TEST(Init, GlorotBoundsAndZeroBias) {
  std::mt19937_64 rng(1);
  const DenseLayer l = init_dense(30, 50, rng);
  const double bound = std::sqrt(6.0 / 80.0);
  EXPECT_LE(l.weight.cwiseAbs().maxCoeff(), bound);
  EXPECT_GT(l.weight.cwiseAbs().maxCoeff(), 0.9 * bound);
  EXPECT_TRUE(l.bias.isZero(0.0));
}

TEST(AE, OutputShapeAndDeterminism) {
  const AEModel model(small_config());
  const Points s = generate_shape(0, 100, 5).points();
  const Points r = reconstruct(model, s);
  EXPECT_EQ(r.rows(), 64);
  EXPECT_EQ(r.cols(), 3);
  EXPECT_TRUE(r.allFinite());
  const Vector z = encode(model, s).latent;
  EXPECT_EQ(z.size(), 16);
  EXPECT_TRUE(decode(model, z) == decode(model, z));
  EXPECT_TRUE(decode(model, z) == r);
  EXPECT_THROW(decode(model, Vector::Zero(15)), ShapeMismatch);
}

TEST(AE, PermutationInvariance) {
  const AEModel model(small_config());
  std::mt19937_64 rng(2);
  for (int cls = 0; cls < 6; ++cls) {
    const Points s = generate_shape(cls, 80, 11).points();
    EXPECT_TRUE(encode(model, shuffled(s, rng)).latent == encode(model, s).latent) << cls;
  }
}

TEST(AE, CriticalSubsetProperty) {
  const AEModel model(small_config());
  for (int cls = 0; cls < 6; ++cls) {
    for (Seed seed = 1; seed <= 3; ++seed) {
      const Points s = generate_shape(cls, 64, seed).points();
      const Encoding e = encode(model, s);
      const auto ids = unique_critical_ids(e);
      EXPECT_LE(static_cast<Index>(ids.size()), model.latent_dim());
      EXPECT_TRUE(std::is_sorted(ids.begin(), ids.end()));
      const Points crit = select(s, ids);
      EXPECT_TRUE(encode(model, crit).latent == e.latent);

      // Padding the critical subset with copies of critical points changes nothing.
      std::vector<Index> padded(ids);
      for (std::size_t j = 0; j < 20; ++j) padded.push_back(ids[j % ids.size()]);
      EXPECT_TRUE(reconstruct(model, select(s, padded)) == reconstruct(model, crit));
    }
  }
}

TEST(AE, CriticalIdsAreFirstArgmax) {
  const AEModel model(small_config());
  const Points s = generate_shape(2, 50, 4).points();
  const Encoding e = encode(model, s);
  ASSERT_EQ(static_cast<Index>(e.critical_ids.size()), model.latent_dim());

  Points doubled(100, 3);
  doubled << s, s;
  EXPECT_EQ(encode(model, doubled).critical_ids, e.critical_ids);

  const Points one = s.topRows(1);
  for (Index id : encode(model, one).critical_ids) EXPECT_EQ(id, 0);
}

TEST(AE, RejectsBadInput) {
  const AEModel model(small_config());
  EXPECT_THROW(encode(model, Points(0, 3)), InvalidInput);
  Points bad = generate_shape(0, 16, 1).points();
  bad(3, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(encode(model, bad), Error);
}

TEST(AE, FrozenRefusesMutation) {
  AEModel model(small_config());
  EXPECT_FALSE(model.mutable_parameters().empty());
  const auto h = parameter_hash(model);
  model.freeze();
  EXPECT_THROW(model.mutable_parameters(), InvalidInput);
  EXPECT_EQ(parameter_hash(model), h);
}

TEST(AE, SeedChangesParameters) {
  AEConfig a = small_config(), b = small_config();
  b.seed = a.seed + 1;
  EXPECT_NE(parameter_hash(AEModel(a)), parameter_hash(AEModel(b)));
  EXPECT_EQ(parameter_hash(AEModel(a)), parameter_hash(AEModel(a)));
}

TEST(AE, ExplicitLayersAreValidated) {
  const AEModel ref(small_config());
  auto enc = ref.encoder();
  enc.back().weight.conservativeResize(Eigen::NoChange, 15);
  EXPECT_THROW(AEModel(small_config(), enc, ref.decoder()), Error);
  EXPECT_NO_THROW(AEModel(small_config(), ref.encoder(), ref.decoder()));
}

TEST(AE, TapeMatchesDirectEvaluation) {
  const AEModel model(small_config());
  const Points s = generate_shape(4, 40, 9).points();
  ad::Tape t;
  const BoundAE b = bind(t, model, false);
  const ad::Var z = encode_on_tape(t, b, t.constant(Matrix(s)));
  const ad::Var r = decode_on_tape(t, b, z);
  EXPECT_TRUE(Vector(t.value(z).transpose()) == encode(model, s).latent);
  EXPECT_TRUE(Points(t.value(r)) == reconstruct(model, s));
}

TEST(Classifier, LogitsShapeAndPermutationInvariance) {
  ClassifierConfig c;
  c.num_classes = 5;
  const Classifier cls(c);
  const Points s = generate_shape(1, 70, 2).points();
  const Matrix logits = classify(cls, s);
  EXPECT_EQ(logits.rows(), 1);
  EXPECT_EQ(logits.cols(), 5);
  EXPECT_TRUE(logits.allFinite());
  std::mt19937_64 rng(8);
  EXPECT_TRUE(classify(cls, shuffled(s, rng)) == logits);
  Index arg = 0;
  logits.row(0).maxCoeff(&arg);
  EXPECT_EQ(predict(cls, s), static_cast<int>(arg));
}

TEST(Classifier, TiesGoToLowerClass) {
  ClassifierConfig c;
  c.num_classes = 3;
  const Classifier base(c);
  auto head = base.head();
  head.back().weight.setZero();
  head.back().bias.setZero();
  const Classifier flat(c, base.point_layers(), head);
  EXPECT_EQ(predict(flat, generate_shape(2, 30, 1).points()), 0);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  AEModel model(small_config());
  model.freeze();
  const fs::path p = scratch("ae.ckpt");
  save_checkpoint(model, p);
  const AEModel back = load_checkpoint(p, 64);
  EXPECT_EQ(parameter_hash(back), parameter_hash(model));
  EXPECT_TRUE(back.frozen());
  EXPECT_EQ(back.latent_dim(), 16);
  const Points s = generate_shape(3, 90, 6).points();
  EXPECT_TRUE(reconstruct(back, s) == reconstruct(model, s));
}

TEST(Checkpoint, PointCountMismatch) {
  const fs::path p = scratch("ae256.ckpt");
  save_checkpoint(AEModel(small_config(256)), p);
  try {
    load_checkpoint(p, 512);
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("n=256"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, CorruptionIsReportedNotCrashed) {
  const fs::path p = scratch("corrupt.ckpt");
  save_checkpoint(AEModel(small_config()), p);
  const std::string good = slurp(p);

  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, std::size_t{14}, good.size() / 2, good.size() - 1}) {
    spit(p, good.substr(0, cut));
    EXPECT_THROW(load_checkpoint(p), CheckpointError) << "cut at " << cut;
  }

  std::string version = good;
  version[8] = 7;  // the version field follows the 8-byte magic
  spit(p, version);
  try {
    load_checkpoint(p);
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }

  std::string flipped = good;
  flipped[good.size() - 20] ^= 0x40;
  spit(p, flipped);
  EXPECT_THROW(load_checkpoint(p), CheckpointError);

  spit(p, good + "x");
  EXPECT_THROW(load_checkpoint(p), CheckpointError);

  EXPECT_THROW(load_checkpoint(scratch("does-not-exist.ckpt")), CheckpointError);
}

TEST(Checkpoint, KindsAreNotInterchangeable) {
  ClassifierConfig c;
  c.num_classes = 4;
  const Classifier cls(c);
  const fs::path p = scratch("cls.ckpt");
  save_classifier(cls, p);
  const Classifier back = load_classifier(p);
  EXPECT_EQ(parameter_hash(back.parameters()), parameter_hash(cls.parameters()));
  EXPECT_EQ(back.num_classes(), 4);
  EXPECT_THROW(load_checkpoint(p), CheckpointError);

  const fs::path q = scratch("ae-kind.ckpt");
  save_checkpoint(AEModel(small_config()), q);
  EXPECT_THROW(load_classifier(q), CheckpointError);
}
