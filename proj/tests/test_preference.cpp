#include <gtest/gtest.h>

#include "senaudit/preference.hpp"
#include "support.hpp"

using namespace senaudit;

namespace {

Contest abc() {
  Contest c;
  c.contest_id = "T";
  c.jurisdiction_name = "Testland";
  c.candidates = {"A", "B", "C"};
  c.seats = 1;
  c.enrolled_voters = 100;
  return c;
}

}  // namespace

TEST(Contest, Validation) {
  auto c = abc();
  EXPECT_NO_THROW(c.validate());
  c.seats = 3;
  EXPECT_ERROR_CODE(schema, c.validate());
  c = abc();
  c.candidates.push_back("A");
  EXPECT_ERROR_CODE(schema, c.validate());
}

TEST(Contest, JsonRoundTrip) {
  nlohmann::json j = abc();
  auto back = j.get<Contest>();
  EXPECT_EQ(back.candidates, abc().candidates);
  EXPECT_EQ(back.jurisdiction_name, "Testland");
  EXPECT_EQ(j["jurisdiction"], "Testland");
}

TEST(Rank, OnlyPositiveIntegers) {
  EXPECT_EQ(parse_rank("1"), 1);
  EXPECT_EQ(parse_rank("12"), 12);
  EXPECT_FALSE(parse_rank(""));
  EXPECT_FALSE(parse_rank("0"));
  EXPECT_FALSE(parse_rank("x"));
  EXPECT_FALSE(parse_rank("-1"));
  EXPECT_FALSE(parse_rank("1234567"));
}

TEST(PreferenceSequence, UsablePrefixStopsAtGapOrDuplicate) {
  PreferenceSequence seq({"2", "1", "4"});
  EXPECT_EQ(seq.usable_prefix(), (std::vector<std::size_t>{1, 0}));
  PreferenceSequence dup({"1", "2", "2"});
  EXPECT_EQ(dup.usable_prefix(), (std::vector<std::size_t>{0}));
  PreferenceSequence none({"2", "", "x"});
  EXPECT_TRUE(none.usable_prefix().empty());
  PreferenceSequence full({"3", "1", "2"});
  EXPECT_EQ(full.usable_prefix(), (std::vector<std::size_t>{1, 2, 0}));
  EXPECT_EQ(PreferenceSequence({"2", "1", "4"}).truncated().cells(), (std::vector<std::string>{"2", "1", ""}));
}

TEST(PreferenceSequence, FromRanks) {
  auto c = abc();
  auto seq = PreferenceSequence::from_ranks(c, {{"C", 1}, {"A", 2}});
  EXPECT_EQ(seq.cells(), (std::vector<std::string>{"2", "", "1"}));
  EXPECT_EQ(seq.rankings(c), (std::map<std::string, int>{{"A", 2}, {"C", 1}}));
  EXPECT_ERROR_CODE(schema, PreferenceSequence::from_ranks(c, {{"Z", 1}}));
}

TEST(PreferenceFile, ParsesReorderedColumnsAndBom) {
  auto c = abc();
  std::string text = "\xEF\xBB\xBF" "C,ballot_index,origin,A,B\r\n2,0,box1,1,\r\n,1,box1,,1\r\n";
  auto b = parse_preference_file(text, c, "b1");
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b.ballots()[0].preferences.cells(), (std::vector<std::string>{"1", "", "2"}));
  EXPECT_EQ(b.ballots()[1].origin_label, "box1");
  EXPECT_EQ(b.batch_id(), "b1");
  EXPECT_EQ(b.contest_id(), "T");
}

TEST(PreferenceFile, Errors) {
  auto c = abc();
  EXPECT_ERROR_CODE(empty_batch, parse_preference_file("", c));
  EXPECT_ERROR_CODE(empty_batch, parse_preference_file(" \n\r\n", c));
  EXPECT_ERROR_CODE(format, parse_preference_file("origin,A,B,C\n", c));
  EXPECT_ERROR_CODE(format, parse_preference_file("ballot_index,origin,A,B\n", c));
  EXPECT_ERROR_CODE(schema, parse_preference_file("ballot_index,origin,A,B,C,D\n", c));
  EXPECT_ERROR_CODE(format, parse_preference_file("ballot_index,origin,A,B,C\n0,x,1,2\n", c));
  EXPECT_ERROR_CODE(format, parse_preference_file("ballot_index,origin,A,B,C\n1,x,1,2,3\n", c));
  EXPECT_ERROR_CODE(format, parse_preference_file("ballot_index,origin,A,B,C\n0,x,1,2,3\n0,x,1,2,3\n", c));
  EXPECT_ERROR_CODE(format, parse_preference_file("ballot_index,origin,A,B,C\n-1,x,1,2,3\n", c));
  EXPECT_ERROR_CODE(format, parse_preference_file("ballot_index,origin,A,B,C\n0,x,\"1,2,3\n", c));
}

TEST(PreferenceFile, HeaderOnlyIsAnEmptyBatch) {
  auto b = parse_preference_file("ballot_index,origin,A,B,C\n", abc());
  EXPECT_EQ(b.size(), 0u);
}

TEST(PreferenceFile, WriteParseRoundTripKeepsMalformedMarks) {
  auto c = abc();
  std::vector<IndexedBallot> ballots{
      {0, PreferenceSequence({"1", "1", "?"}), "box,1"},
      {1, PreferenceSequence({"", "", ""}), "box2"},
      {2, PreferenceSequence({"3", "2", "1"}), "box2"},
  };
  Batch b("b", "T", ballots);
  auto text = to_preference_csv(b, c);
  auto back = parse_preference_file(text, c, "b");
  EXPECT_EQ(back.ballots(), b.ballots());
  EXPECT_EQ(canonical_serialization(back), canonical_serialization(b));
}

TEST(Commitment, DeterministicIdempotentAndTamperEvident) {
  auto c = abc();
  auto text = "ballot_index,origin,A,B,C\n0,x,1,2,3\n1,x,,1,\n";
  auto b1 = parse_preference_file(text, c, "b");
  auto b2 = parse_preference_file(text, c, "b");
  auto d1 = commit_batch(b1, Timestamp{1000});
  EXPECT_EQ(d1, commit_batch(b2, Timestamp{2000}));
  EXPECT_EQ(commit_batch(b1, Timestamp{5000}), d1);
  EXPECT_EQ(b1.commitment()->at, Timestamp{1000});
  EXPECT_EQ(d1, sha256("0,x,1,2,3\n1,x,,1,\n"));

  auto tampered = parse_preference_file("ballot_index,origin,A,B,C\n0,x,1,3,2\n1,x,,1,\n", c, "b");
  EXPECT_ERROR_CODE(integrity, tampered.restore_commitment(*b1.commitment()));
  auto fresh = parse_preference_file(text, c, "b");
  EXPECT_NO_THROW(fresh.restore_commitment(*b1.commitment()));
}

TEST(Commitment, CommitFileRoundTrip) {
  Commitment c{sha256("x"), Timestamp{1'700'000'000'000}};
  auto back = parse_commit_file(format_commit_file(c));
  EXPECT_EQ(back.digest, c.digest);
  EXPECT_EQ(back.at, c.at);
  EXPECT_ERROR_CODE(format, parse_commit_file("digest=00\n"));
}
