#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "alignlab/config.hpp"
#include "alignlab/report.hpp"

using namespace alignlab;

TEST_CASE("an empty config yields the documented defaults") {
  const LabConfig c = parse_config("");
  CHECK(c.loss.lambda == doctest::Approx(0.2));
  CHECK(c.loss.decay == doctest::Approx(0.95));
  CHECK(c.loss.propagation == Propagation::SuffixSum);
  CHECK(c.loss.normalize == Normalize::PerToken);
  CHECK(c.beta_dpo == doctest::Approx(0.1));
  CHECK(c.beta_orpo == doctest::Approx(0.25));
  CHECK_FALSE(c.loss.dot_product_total);
  CHECK(c.frozen_lake.epochs == 400);
  CHECK(c.frozen_lake.seeds == std::vector<std::uint64_t>{1, 2, 3, 4, 5});
  CHECK(c.frozen_lake.methods ==
        std::vector<std::string>{"sft", "ift", "dpo_offline", "orpo"});
  CHECK(c.toy_lm.corpus.task == TaskKind::ModularChain);
  CHECK(c.toy_lm.corpus.chain_steps == 9);
  CHECK(c.toy_lm.methods == std::vector<std::string>{"sft", "ift"});
  CHECK_NOTHROW(c.validate());

  // per-method loss views carry their own contrastive temperature
  CHECK(c.loss_for_dpo().beta == doctest::Approx(0.1));
  CHECK(c.loss_for_orpo().beta == doctest::Approx(0.25));
}

TEST_CASE("sections and comments parse") {
  const std::string text =
      "# top comment\n"
      "[loss]\n"
      "lambda = 0.3\n"
      "alpha = 0.9\n"
      "propagation = scaled_suffix\n"
      "normalize = none\n"
      "\n"
      "[frozen_lake]\n"
      "epochs = 250\n"
      "seeds = 3,4\n"
      "methods = sft,ift\n"
      "[toy_lm]\n"
      "task = copy\n"
      "vocab_size = 6\n"
      "eval_every = 10\n";
  const LabConfig c = parse_config(text);
  CHECK(c.loss.lambda == doctest::Approx(0.3));
  CHECK(c.loss.decay == doctest::Approx(0.9));
  CHECK(c.loss.propagation == Propagation::ScaledSuffix);
  CHECK(c.loss.normalize == Normalize::None);
  CHECK(c.frozen_lake.epochs == 250);
  CHECK(c.frozen_lake.seeds == std::vector<std::uint64_t>{3, 4});
  CHECK(c.frozen_lake.methods == std::vector<std::string>{"sft", "ift"});
  CHECK(c.toy_lm.corpus.task == TaskKind::Copy);
  CHECK(c.toy_lm.corpus.vocab_size == 6);
  CHECK(c.toy_lm.eval_every == 10);
}

TEST_CASE("parse failures name every offender") {
  CHECK_THROWS_WITH_AS(parse_config("[loss]\nwat = 1\nalso_wat = 2\n"),
                       "unknown config keys: loss.wat loss.also_wat",
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config("[mystery]\nx = 1\n"),
                       "unknown config keys: [mystery] mystery.x",
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config("[loss\nlambda = 0.1\n"),
                       doctest::Contains("malformed section header"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config("[loss]\nlambda 0.1\n"),
                       doctest::Contains("expected key=value"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config("[loss]\nlambda = abc\n"),
                       doctest::Contains("malformed number"),
                       std::invalid_argument);
}

TEST_CASE("validation happens on load, not parse") {
  LabConfig c = parse_config("[loss]\nlambda = 1.5\n");
  CHECK_THROWS_WITH_AS(c.validate(), "lambda must lie in [0, 1]",
                       std::invalid_argument);
}

TEST_CASE("overrides resolve bare and qualified keys") {
  LabConfig c = parse_config("");

  apply_override(c, "lambda=0.4");  // unique across sections: bare is fine
  CHECK(c.loss.lambda == doctest::Approx(0.4));

  apply_override(c, "frozen_lake.epochs=99");
  CHECK(c.frozen_lake.epochs == 99);
  CHECK(c.toy_lm.epochs == LabConfig{}.toy_lm.epochs);  // untouched

  SUBCASE("one argument may carry several pairs") {
    apply_override(c, "lambda=0.0 propagation=off");
    CHECK(c.loss.lambda == doctest::Approx(0.0));
    CHECK(c.loss.propagation == Propagation::Off);
  }
  SUBCASE("ambiguous bare keys must be qualified") {
    CHECK_THROWS_WITH_AS(
        apply_override(c, "epochs=10"),
        "ambiguous key 'epochs'; qualify as frozen_lake.epochs toy_lm.epochs",
        std::invalid_argument);
  }
  SUBCASE("malformed overrides") {
    CHECK_THROWS_WITH_AS(apply_override(c, "lambda"),
                         doctest::Contains("override must be key=value"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(apply_override(c, "   "), "empty override",
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(apply_override(c, "nope=1"),
                         doctest::Contains("unknown config keys"),
                         std::invalid_argument);
  }
}

TEST_CASE("the canonical echo is a fixed point of parsing") {
  LabConfig c = parse_config("");
  apply_override(c, "lambda=0.35 frozen_lake.lr=0.00125 toy_lm.seeds=9,10");
  apply_override(c, "dot_product_total=true");

  const std::string echo = canonical_config(c);
  const LabConfig reparsed = parse_config(echo);
  CHECK(canonical_config(reparsed) == echo);

  // the echo names every section it uses
  CHECK(echo.find("[loss]") != std::string::npos);
  CHECK(echo.find("[frozen_lake]") != std::string::npos);
  CHECK(echo.find("[toy_lm]") != std::string::npos);
  CHECK(echo.find("dot_product_total=true") != std::string::npos);

  SUBCASE("the hash tracks the canonical text") {
    const std::string h = config_hash(c);
    CHECK(h.size() == 16);
    CHECK(h.find_first_not_of("0123456789abcdef") == std::string::npos);
    CHECK(config_hash(reparsed) == h);

    LabConfig other = c;
    apply_override(other, "lambda=0.36");
    CHECK(config_hash(other) != h);
  }
}

TEST_CASE("load_config reads a file and applies overrides in order") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "alignlab_cfg_test";
  fs::create_directories(dir);
  const fs::path file = dir / "lab.cfg";
  {
    std::ofstream out(file);
    out << "[loss]\nlambda = 0.1\n";
  }

  const LabConfig c =
      load_config(file.string(), {"lambda=0.2", "lambda=0.25"});
  CHECK(c.loss.lambda == doctest::Approx(0.25));  // last override wins

  CHECK_THROWS_WITH_AS(load_config((dir / "missing.cfg").string(), {}),
                       doctest::Contains("cannot open config"),
                       std::invalid_argument);
  // a config that parses but fails validation is rejected on load
  const fs::path bad = dir / "bad.cfg";
  {
    std::ofstream out(bad);
    out << "[loss]\nlambda = 2.0\n";
  }
  CHECK_THROWS_WITH_AS(load_config(bad.string(), {}),
                       "lambda must lie in [0, 1]", std::invalid_argument);
  fs::remove_all(dir);
}

TEST_CASE("csv tables round-trip at full precision") {
  std::vector<CsvRow> rows;
  rows.push_back({"sft", 1, 0.1 + 0.2, 7.0, 6});  // 0.30000000000000004
  rows.push_back({"ift", 2, 1.0 / 3.0, 15.0, 9});

  const std::string text = format_csv(rows);
  CHECK(text.rfind("method,seed,mse,coverage,steps\n", 0) == 0);

  const std::vector<CsvRow> back = parse_csv(text);
  REQUIRE(back.size() == 2);
  CHECK(back[0].method == "sft");
  CHECK(back[0].seed == 1);
  CHECK(back[0].mse == rows[0].mse);  // bit-for-bit through %.17g
  CHECK(back[1].mse == rows[1].mse);
  CHECK(back[1].steps == 9);

  CHECK_THROWS_WITH_AS(parse_csv("method,mse\n"),
                       doctest::Contains("unexpected csv header"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      parse_csv("method,seed,mse,coverage,steps\nsft,1,0.5\n"),
      doctest::Contains("malformed csv row"), std::invalid_argument);

  const std::string toylm = format_toylm_csv(
      {{"ift", 3, 0.25, 0.9, 150}});
  CHECK(toylm.rfind("method,seed,eval_loss,exact_match,epochs\n", 0) == 0);
  CHECK(toylm.find("ift,3,") != std::string::npos);
}

TEST_CASE("atomic writes never clobber existing files") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "alignlab_atomic_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string target = (dir / "results.csv").string();

  const std::string first = atomic_write(target, "one\n");
  CHECK(first == target);
  const std::string second = atomic_write(target, "two\n");
  CHECK(second == (dir / "results-1.csv").string());
  const std::string third = atomic_write(target, "three\n");
  CHECK(third == (dir / "results-2.csv").string());

  std::ifstream in(target);
  std::string content;
  std::getline(in, content);
  CHECK(content == "one");  // the original is untouched
  fs::remove_all(dir);
}

TEST_CASE("median sorts a copy and averages even splits") {
  CHECK(median({3.0, 1.0, 2.0}) == doctest::Approx(2.0));
  CHECK(median({4.0, 1.0, 3.0, 2.0}) == doctest::Approx(2.5));
  CHECK(median({7.0}) == doctest::Approx(7.0));
  CHECK_THROWS_WITH_AS(median({}), "median of nothing",
                       std::invalid_argument);
}

TEST_CASE("summaries keep first-appearance order") {
  std::vector<CsvRow> rows;
  rows.push_back({"sft", 1, 0.3, 7, 6});
  rows.push_back({"ift", 1, 0.1, 7, 6});
  rows.push_back({"sft", 2, 0.5, 9, 8});
  rows.push_back({"sft", 3, 0.4, 8, 7});

  const std::vector<MethodSummary> s = summarize(rows);
  REQUIRE(s.size() == 2);
  CHECK(s[0].method == "sft");
  CHECK(s[0].runs == 3);
  CHECK(s[0].median_mse == doctest::Approx(0.4));
  CHECK(s[0].median_coverage == doctest::Approx(8.0));
  CHECK(s[1].method == "ift");
  CHECK(s[1].runs == 1);
}

TEST_CASE("the ordering verdict encodes the cross-method claim") {
  auto row = [](const std::string& m, std::uint64_t seed, Scalar mse) {
    return CsvRow{m, seed, mse, 7.0, 6};
  };

  SUBCASE("all requirements met") {
    const OrderingVerdict v = ordering_verdict(
        {row("sft", 1, 0.2), row("ift", 1, 0.1), row("orpo", 1, 0.3),
         row("dpo_offline", 1, 0.12)});
    CHECK(v.applicable);
    CHECK(v.ift_below_sft);
    CHECK(v.ift_below_orpo);
    CHECK(v.dpo_within_margin);  // 0.12 <= 1.25 * 0.1
    CHECK(v.dpo_method == "dpo_offline");
    CHECK(v.overall());
    CHECK(v.summary().find("ift") != std::string::npos);
  }
  SUBCASE("dpo outside the 1.25x margin") {
    const OrderingVerdict v = ordering_verdict(
        {row("sft", 1, 0.2), row("ift", 1, 0.1), row("orpo", 1, 0.3),
         row("dpo_offline", 1, 0.13)});
    CHECK(v.applicable);
    CHECK_FALSE(v.dpo_within_margin);
    CHECK_FALSE(v.overall());
  }
  SUBCASE("ift not strictly best") {
    const OrderingVerdict v = ordering_verdict(
        {row("sft", 1, 0.1), row("ift", 1, 0.1), row("orpo", 1, 0.3),
         row("dpo_offline", 1, 0.1)});
    CHECK_FALSE(v.ift_below_sft);
    CHECK_FALSE(v.overall());
  }
  SUBCASE("a missing method makes the verdict inapplicable") {
    const OrderingVerdict v = ordering_verdict(
        {row("sft", 1, 0.2), row("ift", 1, 0.1),
         row("dpo_offline", 1, 0.12)});
    CHECK_FALSE(v.applicable);
    CHECK_FALSE(v.overall());
  }
  SUBCASE("the online variant stands in when offline is absent") {
    const OrderingVerdict v = ordering_verdict(
        {row("sft", 1, 0.2), row("ift", 1, 0.1), row("orpo", 1, 0.3),
         row("dpo_online", 1, 0.11)});
    CHECK(v.applicable);
    CHECK(v.dpo_method == "dpo_online");
  }
  SUBCASE("offline is preferred when both are present") {
    const OrderingVerdict v = ordering_verdict(
        {row("sft", 1, 0.2), row("ift", 1, 0.1), row("orpo", 1, 0.3),
         row("dpo_online", 1, 0.9), row("dpo_offline", 1, 0.12)});
    CHECK(v.dpo_method == "dpo_offline");
    CHECK(v.median_dpo == doctest::Approx(0.12));
    CHECK(v.overall());
  }
  SUBCASE("medians aggregate over seeds") {
    const OrderingVerdict v = ordering_verdict(
        {row("sft", 1, 0.2), row("sft", 2, 0.6), row("sft", 3, 0.4),
         row("ift", 1, 0.1), row("ift", 2, 0.2), row("ift", 3, 0.05),
         row("orpo", 1, 0.5), row("dpo_offline", 1, 0.11)});
    CHECK(v.median_sft == doctest::Approx(0.4));
    CHECK(v.median_ift == doctest::Approx(0.1));
  }
}

TEST_CASE("charts embed the configuration hash") {
  const std::vector<MethodSummary> summaries = summarize(
      {{"sft", 1, 0.3, 7, 6}, {"ift", 1, 0.1, 7, 6}});
  const std::string svg = render_mse_svg(summaries, "deadbeef01234567");
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("</svg>") != std::string::npos);
  CHECK(svg.find("<!-- config_hash: deadbeef01234567 -->") !=
        std::string::npos);
  CHECK(svg.find("sft") != std::string::npos);
  CHECK(svg.find("ift") != std::string::npos);

  const std::string curves = render_curves_svg(
      "training loss",
      {{"sft", {1.0, 0.5, 0.25}}, {"ift", {1.0, 0.4, 0.2}}},
      "deadbeef01234567");
  CHECK(curves.find("<polyline") != std::string::npos);
  CHECK(curves.find("training loss") != std::string::npos);
  CHECK(curves.find("<!-- config_hash: deadbeef01234567 -->") !=
        std::string::npos);
}

TEST_CASE("loss reports serialize to one-line json records") {
  LossReport report;
  report.method = "ift";
  report.token_losses = Vector{{0.5, 0.25}};
  report.weights = Vector{{0.7375, 0.25}};
  report.total = ad::constant_scalar(0.49375);

  const std::string line = report_to_json(report, 12, "deadbeef01234567");
  CHECK(line.find('\n') == std::string::npos);

  const nlohmann::json parsed = nlohmann::json::parse(line);
  CHECK(parsed.at("step").get<int>() == 12);
  CHECK(parsed.at("method").get<std::string>() == "ift");
  CHECK(parsed.at("total").get<double>() == doctest::Approx(0.49375));
  CHECK(parsed.at("config_hash").get<std::string>() == "deadbeef01234567");
  REQUIRE(parsed.at("token_losses").size() == 2);
  CHECK(parsed.at("token_losses")[0].get<double>() == doctest::Approx(0.5));
  REQUIRE(parsed.at("weights").size() == 2);
}
