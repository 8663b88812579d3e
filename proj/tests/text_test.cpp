#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "grad_check.hpp"
#include "svqa/text/encoder.hpp"

using namespace svqa;

namespace {

text::TextConfig small_text() {
  text::TextConfig cfg;
  cfg.width = 32;
  cfg.heads = 4;
  cfg.proj_dim = 16;
  cfg.audio_channels = {4, 8, 8};
  cfg.batch = 8;
  return cfg;
}

}  // namespace

TEST_CASE("feature modes") {
  for (auto m : {text::FeatureMode::no_feat, text::FeatureMode::pooled, text::FeatureMode::full}) {
    CHECK(text::mode_from_name(text::mode_name(m)) == m);
  }
  CHECK_FALSE(text::mode_from_name("one_feat").has_value());
  CHECK(text::feature_rows(text::FeatureMode::full, 16) == 16);
  CHECK(text::feature_rows(text::FeatureMode::pooled, 16) == 1);
}

TEST_CASE("encode_text shapes and constancy") {
  text::TextEncoder enc(small_text());
  const std::string a = "a high tone plays then a soft noise hisses";
  const std::string b = "the fast clicks rattle";
  CHECK(enc.encode_text(a, text::FeatureMode::no_feat) == enc.encode_text(b, text::FeatureMode::no_feat));
  CHECK(enc.encode_text(a, text::FeatureMode::no_feat).shape() == Shape{1, 32});
  CHECK(enc.encode_text(a, text::FeatureMode::pooled).shape() == Shape{1, 32});
  CHECK(enc.encode_text(a, text::FeatureMode::full).shape() == Shape{16, 32});
  CHECK(enc.encode_text(a, text::FeatureMode::full) == enc.encode_text(a, text::FeatureMode::full));
  CHECK(enc.encode_text(a, text::FeatureMode::pooled) != enc.encode_text(b, text::FeatureMode::pooled));

  const Array full = enc.encode_text(b, text::FeatureMode::full);
  // CLS + 4 words; rows from 5 on are padding.
  for (std::int64_t r = 5; r < 16; ++r) {
    for (std::int64_t k = 0; k < 32; ++k) CHECK(full[static_cast<std::size_t>(r * 32 + k)] == 0.0);
  }
}

TEST_CASE("padding never reaches real positions") {
  text::TextEncoder enc(small_text());
  const std::string caption = "some slow clicks tick while a low beep buzzes";
  const Array full = enc.encode_text(caption, text::FeatureMode::full);
  const Array pooled = enc.encode_text(caption, text::FeatureMode::pooled);
  Rng rng(2);
  auto& tok = enc.params().get("txt.tok").value;
  for (std::int64_t k = 0; k < 32; ++k) tok[static_cast<std::size_t>(data::Vocabulary::kPad * 32 + k)] = rng.uniform(-3.0, 3.0);
  auto& pos = enc.params().get("txt.pos").value;
  for (std::int64_t k = 0; k < 32; ++k) pos[static_cast<std::size_t>(15 * 32 + k)] += rng.uniform(-3.0, 3.0);
  CHECK(enc.encode_text(caption, text::FeatureMode::full) == full);
  CHECK(enc.encode_text(caption, text::FeatureMode::pooled) == pooled);
}

TEST_CASE("tokenization") {
  text::TextEncoder enc(small_text());
  const auto row = enc.tokenize("a purple tone");
  CHECK(row.ids[0] == data::Vocabulary::kCls);
  CHECK(row.ids[2] == data::Vocabulary::kUnk);
  CHECK(row.length == 4);
  CHECK(row.ids[4] == data::Vocabulary::kPad);

  std::vector<int> words(20, enc.vocabulary().id("tone"));
  const auto cut = text::make_token_row(words, 16);
  CHECK(cut.ids.size() == 16);
  CHECK(cut.length == 16);
  CHECK(cut.ids[15] == enc.vocabulary().id("tone"));
}

TEST_CASE("symmetric InfoNCE") {
  SUBCASE("equal logits give ln B per direction") {
    Tape t;
    const auto l = text::info_nce(t.constant(Array({2, 2}, 0.3)));
    CHECK(l.audio_to_text.value().item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
    CHECK(l.text_to_audio.value().item() == doctest::Approx(0.693).epsilon(1e-3));
    CHECK(l.total.value().item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  }
  SUBCASE("a single pair is rejected") {
    Tape t;
    CHECK_THROWS_AS(text::info_nce(t.constant(Array({1, 1}, 1.0))), std::invalid_argument);
  }
  SUBCASE("per-row oracle and permutation invariance") {
    Rng rng(5);
    const std::int64_t b = 5;
    const Array logits = testing::random_array({b, b}, rng, -3.0, 3.0);
    double rows = 0.0, cols = 0.0;
    for (std::int64_t i = 0; i < b; ++i) {
      double zr = 0.0, zc = 0.0;
      for (std::int64_t j = 0; j < b; ++j) {
        zr += std::exp(logits[static_cast<std::size_t>(i * b + j)]);
        zc += std::exp(logits[static_cast<std::size_t>(j * b + i)]);
      }
      rows += std::log(zr) - logits[static_cast<std::size_t>(i * b + i)];
      cols += std::log(zc) - logits[static_cast<std::size_t>(i * b + i)];
    }
    Tape t;
    const auto l = text::info_nce(t.constant(logits));
    CHECK(l.audio_to_text.value().item() == doctest::Approx(rows / b).epsilon(1e-12));
    CHECK(l.text_to_audio.value().item() == doctest::Approx(cols / b).epsilon(1e-12));

    const std::vector<std::int64_t> perm{3, 0, 4, 1, 2};
    Array shuffled({b, b});
    for (std::int64_t i = 0; i < b; ++i) {
      for (std::int64_t j = 0; j < b; ++j) shuffled[static_cast<std::size_t>(i * b + j)] = logits[static_cast<std::size_t>(perm[i] * b + perm[j])];
    }
    CHECK(text::info_nce(t.constant(shuffled)).total.value().item() == doctest::Approx(l.total.value().item()).epsilon(1e-12));
  }
}

TEST_CASE("top-1 accuracy") {
  Array eye({4, 4}, 0.0);
  for (int i = 0; i < 4; ++i) eye[static_cast<std::size_t>(i * 5)] = 1.0;
  CHECK(text::top1_accuracy(eye) == 1.0);
  Array swapped = eye;
  swapped[0] = 0.0;
  swapped[1] = 1.0;
  CHECK(text::top1_accuracy(swapped) == 0.75);
}

TEST_CASE("retrieval and contrastive pretraining on a small corpus") {
  const auto dir = std::filesystem::temp_directory_path() / "svqa_text_test";
  std::filesystem::remove_all(dir);
  const auto manifest = data::generate_corpus(80, 11, dir);
  const dsp::AudioConfig audio;
  const auto fb = dsp::MelFilterbank::create(audio.sample_rate, audio.n_fft, audio.mel_bands);
  const auto clips = data::load_clips(manifest, dir, "", audio, fb);

  text::TextConfig cfg = small_text();
  cfg.steps = 200;
  cfg.lr = 2e-3;
  text::TextEncoder enc(cfg);
  text::ContrastiveHeads heads(enc, audio.mel_bands, audio.frames());

  const double chance = text::retrieval_eval(enc, heads, clips, 8, 3, 50);
  CHECK(std::abs(chance - 0.125) <= 0.1);
  CHECK(text::retrieval_eval(enc, heads, clips, 8, 3, 50) == chance);
  CHECK_THROWS_AS(text::retrieval_eval(enc, heads, clips, 1, 3), std::invalid_argument);

  const std::string forward = "a high tone plays then a soft noise hisses";
  const std::string swapped = "a soft noise hisses then a high tone plays";
  const auto report = text::contrastive_pretrain(enc, heads, clips, {});
  CHECK(report.final_loss < std::log(8.0));
  CHECK(enc.encode_text(forward, text::FeatureMode::full) != enc.encode_text(swapped, text::FeatureMode::full));

  SUBCASE("checkpoint round trip carries the vocabulary") {
    Checkpoint ck;
    enc.save_to(ck, false);
    ck.save(dir / "txt.svqa");
    const Checkpoint back = Checkpoint::load(dir / "txt.svqa");
    const auto vocab = text::TextEncoder::vocabulary_from(back);
    CHECK(vocab.size() == data::Vocabulary::standard().size());
    text::TextEncoder restored(cfg, vocab);
    restored.load_from(back);
    const Array a = enc.encode_text(forward, text::FeatureMode::pooled);
    const Array b = restored.encode_text(forward, text::FeatureMode::pooled);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == doctest::Approx(a[i]).epsilon(1e-5));

    text::TextEncoder other(cfg, data::Vocabulary::from_words({"<pad>", "<cls>", "<unk>", "tone"}));
    CHECK_THROWS_AS(other.load_from(back), CheckpointError);
  }
  SUBCASE("a batch larger than the corpus is rejected") {
    text::TextConfig big = cfg;
    big.batch = 200;
    text::TextEncoder e2(big);
    text::ContrastiveHeads h2(e2, audio.mel_bands, audio.frames());
    CHECK_THROWS_AS(text::contrastive_pretrain(e2, h2, clips, {}), std::invalid_argument);
  }
  std::filesystem::remove_all(dir);
}
