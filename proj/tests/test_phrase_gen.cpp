#include <gtest/gtest.h>

#include <cstdlib>
#include <thread>

#include "owclip/llm_http.hpp"

namespace owclip {
namespace {

std::size_t count_occurrences(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + 1)) ++n;
  return n;
}

TEST(RenderPrompt, SubstitutesLabelAndCount) {
  const auto p = render_prompt("zebra", 10);
  EXPECT_EQ(count_occurrences(p.rendered, "zebra"), 1u);
  EXPECT_NE(p.rendered.find("10"), std::string::npos);
  EXPECT_NE(p.rendered.find("numbered list"), std::string::npos);
  EXPECT_EQ(p.class_label, "zebra");
  EXPECT_EQ(render_prompt("zebra", 10).rendered, p.rendered);
  EXPECT_NE(render_prompt("zebra", 10, 1).rendered, p.rendered);
}

TEST(RenderPrompt, LabelValidation) {
  EXPECT_THROW(render_prompt(""), InputError);
  EXPECT_THROW(render_prompt("   "), InputError);
  EXPECT_THROW(render_prompt(std::string(65, 'a')), InputError);
  EXPECT_THROW(render_prompt("tab\there"), InputError);
  EXPECT_THROW(render_prompt("zebra", 0), InputError);
  EXPECT_NO_THROW(render_prompt(std::string(64, 'a')));
  EXPECT_EQ(render_prompt("  padded  ").class_label, "padded");
}

TEST(RenderPrompt, DelimiterCharactersRoundTripThroughEcho) {
  EchoProvider echo;
  for (const std::string label : {"a<<b>>c", "x>>", "<<", "back\\slash", "ends with \\", ">> <<\\>", "plain"}) {
    const auto p = render_prompt(label);
    const auto list = parse_phrases(echo.generate(p.rendered));
    ASSERT_EQ(list.phrases.size(), 1u) << label;
    EXPECT_EQ(list.phrases[0], label);
  }
}

TEST(ParsePhrases, CanonicalForm) {
  const auto l = parse_phrases("1. black and white striped pattern\n2. erect mane");
  EXPECT_EQ(l.phrases, (std::vector<std::string>{"black and white striped pattern", "erect mane"}));
  EXPECT_EQ(l.selected, (std::vector<bool>{false, false}));
}

TEST(ParsePhrases, NoListIsParseError) { EXPECT_THROW(parse_phrases("no list here, sorry"), ParseError); }

TEST(ParsePhrases, DeduplicatesCaseInsensitively) {
  EXPECT_EQ(parse_phrases("1) A\n1) A\n2) B").phrases, (std::vector<std::string>{"A", "B"}));
  EXPECT_EQ(parse_phrases("1. Mane\n2. mane\n3. MANE ").phrases, (std::vector<std::string>{"Mane"}));
}

TEST(ParsePhrases, GrammarEdges) {
  const auto l = parse_phrases(
      "Sure! Here you go:\r\n"
      "  12.   padded phrase   \r\n"
      "3.no space\n"
      "4)\ttabbed\n"
      "5.    \n"
      "- bullet\n"
      "x. letter\n"
      "6.",
      "lbl");
  EXPECT_EQ(l.class_label, "lbl");
  EXPECT_EQ(l.phrases, (std::vector<std::string>{"padded phrase", "tabbed"}));
}

TEST(ParsePhrases, IdempotentOnSerializedOutput) {
  Rng rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    std::string raw;
    const std::size_t lines = 1 + rng.index(12);
    for (std::size_t i = 0; i < lines; ++i) {
      raw += std::to_string(rng.index(20)) + (rng.uniform() < 0.5 ? ". " : ") ");
      const std::size_t len = 1 + rng.index(15);
      for (std::size_t c = 0; c < len; ++c) raw.push_back("abcAB .-'"[rng.index(9)]);
      raw += "\n";
    }
    PhraseList first;
    try {
      first = parse_phrases(raw);
    } catch (const ParseError&) {
      continue;
    }
    const auto second = parse_phrases(serialize_phrases(first));
    ASSERT_EQ(first.phrases, second.phrases);
  }
}

TEST(ParsePhrases, ArbitraryBytesNeverCrash) {
  Rng rng(99);
  for (int trial = 0; trial < 20000; ++trial) {
    std::string raw(rng.index(200), '\0');
    for (char& c : raw) {
      // Bias toward grammar characters so many inputs get deep into the parser.
      const double u = rng.uniform();
      c = u < 0.3 ? "0123456789.) \n\t\r"[rng.index(17)] : static_cast<char>(rng.index(256));
    }
    try {
      const auto l = parse_phrases(raw);
      for (const auto& p : l.phrases) ASSERT_FALSE(p.empty());
    } catch (const ParseError&) {
    }
  }
}

TEST(MockProvider, DeterministicFixtureAndFallback) {
  MockProvider mock;
  const auto z = generate_phrases(mock, "zebra");
  EXPECT_EQ(z.phrases.size(), 10u);
  EXPECT_EQ(z.phrases, MockProvider::default_banks().at("zebra"));
  EXPECT_EQ(generate_phrases(mock, "Zebra").phrases, z.phrases);

  const auto a = generate_phrases(mock, "wombat"), b = generate_phrases(mock, "wombat");
  EXPECT_EQ(a.phrases, b.phrases);
  EXPECT_EQ(a.phrases.size(), 10u);
  EXPECT_NE(a.phrases, generate_phrases(mock, "quokka").phrases);
  EXPECT_EQ(generate_phrases(mock, "wombat", 3).phrases.size(), 3u);
}

TEST(MockProvider, RoundTripsAnyWellFormedBank) {
  Rng rng(12);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<std::string> bank;
    std::unordered_set<std::string> lower;
    const std::size_t n = 1 + rng.index(15);
    while (bank.size() < n) {
      std::string p;
      const std::size_t len = 1 + rng.index(20);
      for (std::size_t c = 0; c < len; ++c) p.push_back("abcdeXYZ -/()'0123456789"[rng.index(24)]);
      p = trim(p);
      if (p.empty() || !lower.insert(ascii_lower(p)).second) continue;
      bank.push_back(p);
    }
    MockProvider mock({{"thing", bank}});
    EXPECT_EQ(generate_phrases(mock, "thing", n).phrases, bank);
  }
}

TEST(SelectPhrases, Flags) {
  PhraseList l = parse_phrases("1. a\n2. b\n3. c\n4. d\n5. e\n6. f\n7. g\n8. h\n9. i\n10. j");
  const auto some = select_phrases(l, {0, 2, 5});
  EXPECT_EQ(std::count(some.selected.begin(), some.selected.end(), true), 3);
  EXPECT_TRUE(some.selected[0] && some.selected[2] && some.selected[5]);
  EXPECT_EQ(some.selected_phrases(), (std::vector<std::string>{"a", "c", "f"}));
  const auto all = select_all(l);
  EXPECT_EQ(std::count(all.selected.begin(), all.selected.end(), true), 10);
  EXPECT_TRUE(select_phrases(some, {}).selected_phrases().empty());
  EXPECT_THROW(select_phrases(l, {10}), InputError);
}

class FlakyProvider final : public LLMProvider {
 public:
  explicit FlakyProvider(int failures) : failures_(failures) {}
  std::string name() const override { return "flaky"; }
  std::string generate(const std::string& prompt) override {
    prompts.push_back(prompt);
    return calls_++ < failures_ ? "I cannot help with that." : "1. fine phrase\n";
  }
  std::vector<std::string> prompts;

 private:
  int failures_;
  int calls_ = 0;
};

TEST(GeneratePhrases, RepromptsAtMostTwice) {
  FlakyProvider two(2);
  int used = 0;
  EXPECT_EQ(generate_phrases(two, "cat", 10, &used).phrases, (std::vector<std::string>{"fine phrase"}));
  EXPECT_EQ(used, 3);
  EXPECT_NE(two.prompts[1].find("could not be read"), std::string::npos);

  FlakyProvider three(3);
  EXPECT_THROW(generate_phrases(three, "cat", 10, &used), ParseError);
  EXPECT_EQ(used, 3);
  EXPECT_EQ(three.prompts.size(), 3u);
}

TEST(HttpChatProvider, PostsChatRequestWithKeyFromEnvironment) {
  httplib::Server srv;
  std::string seen_auth, seen_model, seen_prompt;
  srv.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    seen_auth = req.get_header_value("Authorization");
    const auto j = nlohmann::json::parse(req.body);
    seen_model = j.at("model");
    seen_prompt = j.at("messages").at(0).at("content");
    const nlohmann::json reply = {{"choices", {{{"message", {{"role", "assistant"}, {"content", "1. x\n2. y"}}}}}}};
    res.set_content(reply.dump(), "application/json");
  });
  srv.Post("/broken", [](const httplib::Request&, httplib::Response& res) { res.status = 500; });
  const int port = srv.bind_to_any_port("127.0.0.1");
  std::thread th([&] { srv.listen_after_bind(); });
  srv.wait_until_ready();

  ::setenv("OWCLIP_TEST_LLM_KEY", "sk-test", 1);
  LlmConfig cfg;
  cfg.provider = "http";
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  cfg.model = "test-model";
  cfg.api_key_env = "OWCLIP_TEST_LLM_KEY";
  cfg.timeout_s = 5;
  auto provider = make_provider(cfg);
  const auto list = generate_phrases(*provider, "zebra");
  EXPECT_EQ(list.phrases, (std::vector<std::string>{"x", "y"}));
  EXPECT_EQ(seen_auth, "Bearer sk-test");
  EXPECT_EQ(seen_model, "test-model");
  EXPECT_EQ(seen_prompt, render_prompt("zebra").rendered);

  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/broken";
  EXPECT_THROW(make_provider(cfg)->generate("x"), ProviderError);
  srv.stop();
  th.join();
  EXPECT_THROW(make_provider(cfg)->generate("x"), ProviderError);
  cfg.provider = "carrier-pigeon";
  EXPECT_THROW(make_provider(cfg), ConfigError);
}

}  // namespace
}  // namespace owclip
