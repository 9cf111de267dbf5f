#include "spc/config.hpp"

#include <gtest/gtest.h>

#include <string>

namespace {

using spc::Json;
using spc::ProjectConfig;

TEST(Config, DefaultsRoundTripByteIdentically) {
  ProjectConfig a;
  const std::string blob = spc::canonical_config(a);
  ProjectConfig b = spc::parse_config(Json::parse(blob));
  EXPECT_EQ(blob, spc::canonical_config(b));
  // Sorted keys: "attack" leads the canonical object.
  EXPECT_EQ(blob.rfind("{\"attack\":", 0), 0u);
}

TEST(Config, SchemaVersionRequiredAndChecked) {
  EXPECT_THROW(spc::parse_config(Json::object()), spc::ConfigError);
  Json j = {{"schema_version", 99}};
  EXPECT_THROW(spc::parse_config(j), spc::ConfigError);
  Json ok = {{"schema_version", 1}};
  EXPECT_NO_THROW(spc::parse_config(ok));
}

TEST(Config, UnknownKeysAreHardErrors) {
  Json top = {{"schema_version", 1}, {"bogus", 3}};
  EXPECT_THROW(spc::parse_config(top), spc::ConfigError);
  Json nested = {{"schema_version", 1}, {"encoder", {{"n", 4}, {"nn", 8}}}};
  EXPECT_THROW(spc::parse_config(nested), spc::ConfigError);
  Json attack = {{"schema_version", 1}, {"attack", {{"modee", "pgd"}}}};
  EXPECT_THROW(spc::parse_config(attack), spc::ConfigError);
}

TEST(Config, EnumValuesValidated) {
  auto with = [](const char* section, Json body) {
    Json j = {{"schema_version", 1}};
    j[section] = body;
    return j;
  };
  EXPECT_THROW(spc::parse_config(with("training", {{"mode", "sorta-joint"}})),
               spc::ConfigError);
  EXPECT_THROW(spc::parse_config(with("attack", {{"mode", "fgsm"}})),
               spc::ConfigError);
  EXPECT_THROW(spc::parse_config(with("attack", {{"surrogate", "sharp"}})),
               spc::ConfigError);
  EXPECT_THROW(spc::parse_config(with("attack", {{"loss", "hinge"}})),
               spc::ConfigError);
  EXPECT_THROW(spc::parse_config(with("data", {{"source", "imagenet"}})),
               spc::ConfigError);
  Json p = {{"schema_version", 1}, {"precision", "fp16"}};
  EXPECT_THROW(spc::parse_config(p), spc::ConfigError);
}

TEST(Config, EncoderSectionGoesThroughItsOwnValidation) {
  Json j = {{"schema_version", 1}, {"encoder", {{"p", 1.5}}}};
  EXPECT_THROW(spc::parse_config(j), spc::ConfigError);
}

TEST(Config, DecoderLayersValidated) {
  Json bad_row = {{"schema_version", 1},
                  {"decoder", {{"layers", {{48, 2, 2}}}}}};
  EXPECT_THROW(spc::parse_config(bad_row), spc::ConfigError);
  Json not_rgb = {{"schema_version", 1},
                  {"decoder", {{"layers", {{48, 2, 2, 0}, {16, 3, 1, 1}}}}}};
  EXPECT_THROW(spc::parse_config(not_rgb), spc::ConfigError);
  Json ok = {{"schema_version", 1},
             {"decoder", {{"layers", {{48, 2, 2, 0}, {3, 3, 1, 1}}}}}};
  ProjectConfig c = spc::parse_config(ok);
  ASSERT_EQ(c.decoder_layers.size(), 2u);
  EXPECT_EQ(c.decoder_layers[0].out_ch, 48);
  EXPECT_EQ(c.decoder_layers[1].pad, 1);
}

TEST(Config, OverridesFollowDottedPaths) {
  Json j = spc::to_json(ProjectConfig{});
  spc::apply_override(j, "training.epochs=7");
  spc::apply_override(j, "encoder.p=0.25");
  spc::apply_override(j, "data.source=cifar");
  spc::apply_override(j, "attack.random_start=true");
  ProjectConfig c = spc::parse_config(j);
  EXPECT_EQ(c.training.epochs, 7);
  EXPECT_DOUBLE_EQ(c.encoder.p, 0.25);
  EXPECT_EQ(c.data.source, "cifar");
  EXPECT_TRUE(c.attack.random_start);
  EXPECT_THROW(spc::apply_override(j, "noequals"), spc::ConfigError);
  EXPECT_THROW(spc::apply_override(j, "=5"), spc::ConfigError);
  // Overrides inventing keys are caught at parse time.
  spc::apply_override(j, "training.eppochs=7");
  EXPECT_THROW(spc::parse_config(j), spc::ConfigError);
}

TEST(Config, ExperimentPlanResolvesFromBaseSections) {
  Json j = {{"schema_version", 1},
            {"training", {{"epochs", 9}, {"batch", 16}}},
            {"attack", {{"steps", 7}, {"eps", 0.1}}}};
  ProjectConfig c = spc::parse_config(j);
  ASSERT_EQ(c.experiment.stages.size(), 8u);
  EXPECT_EQ(c.experiment.stages.front(), "learn-dictionary");
  EXPECT_EQ(c.experiment.stages.back(), "report");
  ASSERT_EQ(c.experiment.trainings.size(), 4u);
  // Stage dictates the mode; base hyperparameters flow into every stage.
  EXPECT_EQ(c.experiment.trainings.at("train-natural").mode, "natural");
  EXPECT_EQ(c.experiment.trainings.at("train-defense").mode,
            "supervised-joint");
  EXPECT_EQ(c.experiment.trainings.at("train-sibling").mode,
            "unsupervised-decoder");
  EXPECT_EQ(c.experiment.trainings.at("train-adversarial").mode,
            "pgd-adversarial");
  for (const auto& [stage, t] : c.experiment.trainings) {
    EXPECT_EQ(t.epochs, 9) << stage;
    EXPECT_EQ(t.batch, 16) << stage;
  }
  ASSERT_EQ(c.experiment.attacks.size(), 5u);
  EXPECT_EQ(c.experiment.attacks[0].name, "nt-pgd");
  EXPECT_EQ(c.experiment.attacks[0].target, "natural");
  EXPECT_EQ(c.experiment.attacks[0].section.mode, "pgd");
  EXPECT_EQ(c.experiment.attacks[1].section.mode, "wnfga");
  EXPECT_EQ(c.experiment.attacks[4].section.mode, "bt");
  for (const spc::AttackEntry& e : c.experiment.attacks) {
    EXPECT_EQ(e.section.steps, 7) << e.name;
    EXPECT_DOUBLE_EQ(e.section.eps, 0.1) << e.name;
  }
}

TEST(Config, ExperimentStageListValidated) {
  Json j = {{"schema_version", 1},
            {"experiment", {{"stages", {"learn-dictionary", "attacks"}}}}};
  ProjectConfig c = spc::parse_config(j);
  ASSERT_EQ(c.experiment.stages.size(), 2u);
  // An explicit stage list never disturbs the resolved trainings/attacks.
  EXPECT_EQ(c.experiment.trainings.size(), 4u);
  EXPECT_EQ(c.experiment.attacks.size(), 5u);

  Json unknown = {{"schema_version", 1},
                  {"experiment", {{"stages", {"warmup"}}}}};
  EXPECT_THROW(spc::parse_config(unknown), spc::ConfigError);
  Json dup = {{"schema_version", 1},
              {"experiment", {{"stages", {"report", "report"}}}}};
  EXPECT_THROW(spc::parse_config(dup), spc::ConfigError);
  Json bogus = {{"schema_version", 1}, {"experiment", {{"phases", 1}}}};
  EXPECT_THROW(spc::parse_config(bogus), spc::ConfigError);
}

TEST(Config, PerStageTrainingOverridesApplyOnTopOfBase) {
  Json j = {{"schema_version", 1},
            {"training", {{"epochs", 9}}},
            {"experiment",
             {{"trainings", {{"train-defense", {{"epochs", 3}}}}}}}};
  ProjectConfig c = spc::parse_config(j);
  EXPECT_EQ(c.experiment.trainings.at("train-defense").epochs, 3);
  EXPECT_EQ(c.experiment.trainings.at("train-natural").epochs, 9);
  EXPECT_EQ(c.training.epochs, 9);

  // Stage dictates the mode: per-stage sections may not carry one.
  Json mode = {{"schema_version", 1},
               {"experiment",
                {{"trainings", {{"train-defense", {{"mode", "natural"}}}}}}}};
  EXPECT_THROW(spc::parse_config(mode), spc::ConfigError);
  Json stray = {{"schema_version", 1},
                {"experiment", {{"trainings", {{"evaluate", {{"epochs", 1}}}}}}}};
  EXPECT_THROW(spc::parse_config(stray), spc::ConfigError);
}

TEST(Config, AttackEntriesValidated) {
  auto with_attacks = [](Json rows) {
    return Json{{"schema_version", 1}, {"experiment", {{"attacks", rows}}}};
  };
  ProjectConfig c = spc::parse_config(with_attacks(Json::array(
      {{{"name", "probe"}, {"target", "defense"}, {"mode", "wnfga"},
        {"steps", 3}}})));
  ASSERT_EQ(c.experiment.attacks.size(), 1u);
  EXPECT_EQ(c.experiment.attacks[0].section.steps, 3);
  // Unset fields inherit the base attack section.
  EXPECT_EQ(c.experiment.attacks[0].section.images, c.attack.images);

  EXPECT_THROW(spc::parse_config(with_attacks(Json::array({{{"name", ""}}}))),
               spc::ConfigError);
  EXPECT_THROW(spc::parse_config(with_attacks(
                   Json::array({{{"name", "has space"}}}))),
               spc::ConfigError);
  EXPECT_THROW(spc::parse_config(with_attacks(Json::array(
                   {{{"name", "a"}, {"target", "defense"}, {"mode", "wnfga"}},
                    {{"name", "a"}, {"target", "defense"}, {"mode", "waiga"}}}))),
               spc::ConfigError);
  EXPECT_THROW(spc::parse_config(with_attacks(Json::array(
                   {{{"name", "x"}, {"target", "teacher"}}}))),
               spc::ConfigError);
}

TEST(Config, AttackModeTargetCompatibilityEnforced) {
  auto entry = [](const char* mode, const char* target) {
    return Json{{"schema_version", 1},
                {"experiment",
                 {{"attacks", Json::array({{{"name", "x"},
                                            {"target", target},
                                            {"mode", mode}}})}}}};
  };
  EXPECT_NO_THROW(spc::parse_config(entry("pgd", "natural")));
  EXPECT_NO_THROW(spc::parse_config(entry("pgd", "adversarial")));
  EXPECT_NO_THROW(spc::parse_config(entry("wnfga", "sibling")));
  EXPECT_NO_THROW(spc::parse_config(entry("pwt", "defense")));
  EXPECT_NO_THROW(spc::parse_config(entry("bt", "defense")));
  // Raw pgd has no meaning against a sparse front and chain attacks none
  // against an identity front; transfers land on the defense only.
  EXPECT_THROW(spc::parse_config(entry("pgd", "defense")), spc::ConfigError);
  EXPECT_THROW(spc::parse_config(entry("wnfga", "natural")), spc::ConfigError);
  EXPECT_THROW(spc::parse_config(entry("waiga", "adversarial")),
               spc::ConfigError);
  EXPECT_THROW(spc::parse_config(entry("pwt", "sibling")), spc::ConfigError);
  EXPECT_THROW(spc::parse_config(entry("bt", "natural")), spc::ConfigError);
}

TEST(Config, EotEntriesDefaultToStraightThroughGradients) {
  auto parse_one = [](Json row) {
    Json j = {{"schema_version", 1},
              {"attack", {{"surrogate", "smooth"}}},
              {"experiment", {{"attacks", Json::array({row})}}}};
    return spc::parse_config(j).experiment.attacks.at(0);
  };
  spc::AttackEntry plain = parse_one(
      {{"name", "e"}, {"target", "defense"}, {"mode", "pgd-eot"}});
  EXPECT_EQ(plain.section.surrogate, "identity");
  spc::AttackEntry forced = parse_one({{"name", "e"},
                                       {"target", "defense"},
                                       {"mode", "pgd-eot"},
                                       {"surrogate", "smooth"}});
  EXPECT_EQ(forced.section.surrogate, "smooth");
  // Other modes keep the base surrogate.
  spc::AttackEntry w = parse_one(
      {{"name", "e"}, {"target", "defense"}, {"mode", "wnfga"}});
  EXPECT_EQ(w.section.surrogate, "smooth");
}

TEST(Config, ResolvedPlanSurvivesAnotherRoundTrip) {
  Json j = {{"schema_version", 1},
            {"training", {{"epochs", 4}}},
            {"experiment",
             {{"stages", {"learn-dictionary", "train-defense"}},
              {"trainings", {{"train-defense", {{"batch", 8}}}}},
              {"attacks", Json::array({{{"name", "probe"},
                                        {"target", "defense"},
                                        {"mode", "waiga"}}})}}}};
  ProjectConfig c = spc::parse_config(j);
  const std::string blob = spc::canonical_config(c);
  ProjectConfig d = spc::parse_config(Json::parse(blob));
  EXPECT_EQ(blob, spc::canonical_config(d));
  EXPECT_EQ(d.experiment.stages.size(), 2u);
  EXPECT_EQ(d.experiment.trainings.at("train-defense").batch, 8);
  ASSERT_EQ(d.experiment.attacks.size(), 1u);
  EXPECT_EQ(d.experiment.attacks[0].name, "probe");
}

TEST(Config, LoadReportsMissingAndMalformedFiles) {
  EXPECT_THROW(spc::load_config("/nonexistent/nope.json"), spc::ConfigError);
  const std::string path = ::testing::TempDir() + "bad_config.json";
  {
    std::ofstream out(path);
    out << "{ not json";
  }
  EXPECT_THROW(spc::load_config(path), spc::ConfigError);
}

}  // namespace
