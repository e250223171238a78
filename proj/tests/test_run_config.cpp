#include <gtest/gtest.h>

#include <json.hpp>

#include "emkd/run_config.hpp"
#include "fixtures.hpp"

namespace emkd {
namespace {

TEST(RunConfig, EmptyObjectGivesValidDefaults) {
  RunConfig rc = parse_run_config("{}");
  EXPECT_EQ(rc.model_teacher.vision_tokens(), 64u);
  EXPECT_EQ(rc.model_student.vision_tokens(), 16u);
  EXPECT_EQ(rc.distill.weights.alpha, 0.5);
  EXPECT_EQ(rc.distill.weights.beta, 0.25);
  EXPECT_EQ(rc.distill.weights.gamma, 25.0);
  EXPECT_EQ(rc.distill.matcher, MatchStrategy::kHungarianLogits);
  EXPECT_NO_THROW(rc.validate());
}

TEST(RunConfig, PartialSectionsOverrideOnlyGivenKeys) {
  RunConfig rc = parse_run_config(R"({"distill": {"alpha": 1.0, "beta": 0, "gamma": 0, "matcher": "pooling"},
                                      "data": {"noise_std": 0.05}})");
  EXPECT_EQ(rc.distill.weights.alpha, 1.0);
  EXPECT_EQ(rc.distill.weights.gamma, 0.0);
  EXPECT_EQ(rc.distill.matcher, MatchStrategy::kPooling);
  EXPECT_EQ(rc.distill.steps, DistillConfig{}.steps);
  EXPECT_EQ(rc.data.noise_std, 0.05);
  EXPECT_EQ(rc.data.num_symbols, 32u);
}

TEST(RunConfig, DumpParseRoundTrip) {
  RunConfig rc = fixtures::tiny_run_config();
  rc.distill.vsd_object = VsdObject::kHidden;
  rc.distill.matcher = MatchStrategy::kHungarianHidden;
  const std::string text = dump_run_config(rc);
  EXPECT_EQ(dump_run_config(parse_run_config(text)), text);
}

TEST(RunConfig, RejectsUnknownKeysAndSections) {
  EXPECT_THROW(parse_run_config(R"({"distill": {"alpah": 0.5}})"), std::invalid_argument);
  EXPECT_THROW(parse_run_config(R"({"optimizer": {}})"), std::invalid_argument);
  EXPECT_THROW(parse_run_config(R"({"data": 3})"), std::invalid_argument);
  EXPECT_THROW(parse_run_config("[1, 2]"), std::invalid_argument);
  EXPECT_THROW(parse_run_config("{not json"), std::invalid_argument);
}

TEST(RunConfig, RejectsBadValues) {
  EXPECT_THROW(parse_run_config(R"({"distill": {"alpha": "half"}})"), std::invalid_argument);
  EXPECT_THROW(parse_run_config(R"({"distill": {"matcher": "greedy"}})"), std::invalid_argument);
  EXPECT_THROW(parse_run_config(R"({"distill": {"alpha": 1.5}})"), std::invalid_argument);
}

TEST(RunConfig, CrossSectionChecks) {
  EXPECT_THROW(parse_run_config(R"({"model_student": {"vocab_size": 65}})"), std::invalid_argument);
  EXPECT_THROW(parse_run_config(R"({"model_teacher": {"vocab_size": 32}, "model_student": {"vocab_size": 32}})"),
               std::invalid_argument);
  EXPECT_THROW(parse_run_config(R"({"data": {"cell_size": 1}})"), std::invalid_argument);
  EXPECT_THROW(parse_run_config(R"({"model_teacher": {"role": "student"}})"), std::invalid_argument);
  EXPECT_THROW(parse_run_config(R"({"model_teacher": {"max_seq_len": 70}})"), std::invalid_argument);
}

TEST(RunConfig, MissingFileIsRuntimeError) {
  EXPECT_THROW(load_run_config("/nonexistent/emkd.json"), std::runtime_error);
}

}  // namespace
}  // namespace emkd
