#include <gtest/gtest.h>

#include "senaudit/csv.hpp"
#include "support.hpp"

using namespace senaudit;

TEST(Csv, QuotesOnlyWhenNeeded) {
  EXPECT_EQ(csv::format_record({"a", "b c", "d,e", "f\"g", ""}), "a,b c,\"d,e\",\"f\"\"g\",\n");
}

TEST(Csv, ParsesCrlfQuotesAndBlankLines) {
  auto r = csv::parse("a,b\r\n\r\n\"x,y\",\"he said \"\"hi\"\"\"\nlast,\"multi\nline\"");
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(r[0], (csv::Record{"a", "b"}));
  EXPECT_EQ(r[1], (csv::Record{"x,y", "he said \"hi\""}));
  EXPECT_EQ(r[2], (csv::Record{"last", "multi\nline"}));
}

TEST(Csv, EmptyFieldsSurvive) {
  auto r = csv::parse(",,\n1,,2\n");
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0], (csv::Record{"", "", ""}));
  EXPECT_EQ(r[1], (csv::Record{"1", "", "2"}));
}

TEST(Csv, RejectsMalformedQuotes) {
  EXPECT_ERROR_CODE(format, csv::parse("a\"b,c\n"));
  EXPECT_ERROR_CODE(format, csv::parse("\"open,c\n"));
}

TEST(Csv, FormatParseRoundTrip) {
  std::mt19937 rng(7);
  const std::string alphabet = "ab,\"\n\r 1";
  for (int trial = 0; trial < 500; ++trial) {
    csv::Record rec;
    int fields = 1 + static_cast<int>(rng() % 5);
    for (int f = 0; f < fields; ++f) {
      std::string s;
      int len = static_cast<int>(rng() % 6);
      for (int i = 0; i < len; ++i) s.push_back(alphabet[rng() % alphabet.size()]);
      rec.push_back(s);
    }
    if (rec.size() == 1 && rec[0].empty()) continue;  // a lone empty field is a blank line
    auto back = csv::parse(csv::format_record(rec));
    ASSERT_EQ(back.size(), 1u);
    EXPECT_EQ(back[0], rec);
  }
}
