#include "uisearch/query.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>

namespace uisearch::query {

namespace {

enum class Tok { Ident, Number, String, LParen, RParen, Comma, Cmp, Tilde, End };

struct Token {
  Tok kind;
  std::string text;  // identifier, raw number, decoded string or operator
  std::size_t offset;
};

bool ieq(std::string_view a, std::string_view b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
           return std::tolower(static_cast<unsigned char>(x)) == std::tolower(static_cast<unsigned char>(y));
         });
}

std::string describe(const Token& t) {
  switch (t.kind) {
    case Tok::End: return "end of query";
    case Tok::String: return "string \"" + t.text + "\"";
    default: return "'" + t.text + "'";
  }
}

std::vector<Token> lex(std::string_view s) {
  std::vector<Token> out;
  std::size_t i = 0;
  auto err = [](std::size_t at, const std::string& m) { return ParseError(ParseError::Kind::Syntax, at, m); };
  while (i < s.size()) {
    const char c = s[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    const std::size_t start = i;
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      while (i < s.size() && (std::isalnum(static_cast<unsigned char>(s[i])) || s[i] == '_' || s[i] == '-')) ++i;
      out.push_back({Tok::Ident, std::string(s.substr(start, i - start)), start});
    } else if (std::isdigit(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '+') {
      if (c == '-' || c == '+') ++i;
      while (i < s.size() && (std::isdigit(static_cast<unsigned char>(s[i])) || s[i] == '.')) ++i;
      if (i < s.size() && (s[i] == 'e' || s[i] == 'E')) {
        ++i;
        if (i < s.size() && (s[i] == '-' || s[i] == '+')) ++i;
        while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
      }
      out.push_back({Tok::Number, std::string(s.substr(start, i - start)), start});
    } else if (c == '"') {
      std::string v;
      ++i;
      bool closed = false;
      while (i < s.size()) {
        if (s[i] == '"') {
          closed = true;
          ++i;
          break;
        }
        if (s[i] == '\\') {
          if (i + 1 >= s.size()) break;
          const char e = s[i + 1];
          switch (e) {
            case '"': v += '"'; break;
            case '\\': v += '\\'; break;
            case 'n': v += '\n'; break;
            case 't': v += '\t'; break;
            default: throw err(i, std::string("unknown escape '\\") + e + "' in string");
          }
          i += 2;
          continue;
        }
        v += s[i++];
      }
      if (!closed) throw err(start, "unterminated string literal");
      out.push_back({Tok::String, std::move(v), start});
    } else if (c == '(') {
      out.push_back({Tok::LParen, "(", i++});
    } else if (c == ')') {
      out.push_back({Tok::RParen, ")", i++});
    } else if (c == ',') {
      out.push_back({Tok::Comma, ",", i++});
    } else if (c == '~') {
      out.push_back({Tok::Tilde, "~", i++});
    } else if (c == '=' || c == '<' || c == '>') {
      ++i;
      if (c != '=' && i < s.size() && s[i] == '=') ++i;
      out.push_back({Tok::Cmp, std::string(s.substr(start, i - start)), start});
    } else {
      throw err(i, std::string("unexpected character '") + c + "'");
    }
  }
  out.push_back({Tok::End, "", s.size()});
  return out;
}

class Parser {
 public:
  explicit Parser(std::string_view text) : toks_(lex(text)) {}

  QueryAst run() {
    QueryAst ast;
    expect_keyword("FIND");
    bool seen[kNumModalities] = {};
    if (accept_keyword("WHERE")) {
      do {
        const std::size_t at = peek().offset;
        Clause c = clause();
        std::optional<Modality> mod;
        if (auto* s = std::get_if<SimilarTo>(&c)) mod = modality_of(s->mode);
        if (std::holds_alternative<IntentClause>(c)) mod = Modality::Intent;
        if (std::holds_alternative<TextMatch>(c)) mod = Modality::Text;
        if (mod) {
          auto& flag = seen[static_cast<std::size_t>(*mod)];
          if (flag)
            throw ParseError(ParseError::Kind::DuplicateMode, at,
                             "duplicate " + std::string(modality_name(*mod)) + " clause");
          flag = true;
        }
        ast.clauses.push_back(std::move(c));
      } while (accept_keyword("AND"));
    }
    if (accept_keyword("ORDER")) {
      expect_keyword("BY");
      expect_keyword("score");
      if (is_keyword(peek(), "ASC"))
        throw ParseError(ParseError::Kind::Syntax, peek().offset, "results are ordered by score descending only");
      accept_keyword("DESC");
    }
    if (accept_keyword("LIMIT")) {
      const Token& t = peek();
      const long long n = integer("LIMIT");
      if (n < 1 || n > static_cast<long long>(kMaxLimit))
        throw ParseError(ParseError::Kind::InvalidValue, t.offset,
                         "LIMIT must be between 1 and " + std::to_string(kMaxLimit));
      ast.limit = static_cast<std::size_t>(n);
    }
    if (peek().kind != Tok::End) fail("expected AND, ORDER BY, LIMIT or end of query");
    return ast;
  }

 private:
  const Token& peek() const { return toks_[pos_]; }
  const Token& next() { return toks_[pos_ < toks_.size() - 1 ? pos_++ : pos_]; }

  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError(ParseError::Kind::Syntax, peek().offset, what + ", found " + describe(peek()));
  }

  static bool is_keyword(const Token& t, std::string_view kw) { return t.kind == Tok::Ident && ieq(t.text, kw); }
  bool accept_keyword(std::string_view kw) {
    if (!is_keyword(peek(), kw)) return false;
    ++pos_;
    return true;
  }
  void expect_keyword(std::string_view kw) {
    if (!accept_keyword(kw)) fail("expected " + std::string(kw));
  }
  void expect(Tok kind, std::string_view what) {
    if (peek().kind != kind) fail("expected " + std::string(what));
    ++pos_;
  }

  long long integer(std::string_view what) {
    const Token& t = peek();
    if (t.kind != Tok::Number) fail("expected an integer for " + std::string(what));
    long long v = 0;
    const char* b = t.text.data();
    const char* e = b + t.text.size();
    if (*b == '+') ++b;
    auto [p, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || p != e)
      throw ParseError(ParseError::Kind::InvalidValue, t.offset, "expected an integer for " + std::string(what) +
                                                                     ", found '" + t.text + "'");
    ++pos_;
    return v;
  }

  double number(std::string_view what) {
    const Token& t = peek();
    if (t.kind != Tok::Number) fail("expected a number for " + std::string(what));
    double v = 0;
    const char* b = t.text.data();
    const char* e = b + t.text.size();
    if (*b == '+') ++b;
    auto [p, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || p != e || !std::isfinite(v))
      throw ParseError(ParseError::Kind::InvalidValue, t.offset, "malformed number '" + t.text + "'");
    ++pos_;
    return v;
  }

  double weight() {
    const std::size_t at = peek().offset;
    const double w = number("weight");
    if (!(w > 0 && w <= 1))
      throw ParseError(ParseError::Kind::InvalidValue, at, "weight must be in (0, 1], got " + toks_[pos_ - 1].text);
    return w;
  }

  std::string string_arg(std::string_view what) {
    if (peek().kind != Tok::String) fail("expected a quoted " + std::string(what));
    return next().text;
  }

  std::optional<graph::ElementType> element_type() {
    const Token& t = peek();
    if (t.kind != Tok::Ident) fail("expected an element type");
    ++pos_;
    if (ieq(t.text, "any")) return std::nullopt;
    auto ty = graph::parse_element_type(t.text);
    if (!ty)
      throw ParseError(ParseError::Kind::UnknownType, t.offset,
                       "unknown element type '" + t.text + "'; valid types are any, " + graph::valid_type_list());
    return ty;
  }

  int count_value() {
    const Token& t = peek();
    const long long v = integer("count");
    if (v < 0 || v > 1'000'000)
      throw ParseError(ParseError::Kind::InvalidValue, t.offset, "count bound out of range: " + t.text);
    return static_cast<int>(v);
  }

  Predicate predicate(bool negated) {
    Predicate p;
    p.negated = negated;
    if (accept_keyword("has")) {
      expect(Tok::LParen, "'('");
      p.pred.type = element_type();
      expect(Tok::RParen, "')'");
      p.pred.op = index::CountOp::Has;
      return p;
    }
    if (!accept_keyword("count")) fail("expected count(...) or has(...)");
    expect(Tok::LParen, "'('");
    p.pred.type = element_type();
    expect(Tok::RParen, "')'");
    if (accept_keyword("BETWEEN")) {
      const std::size_t at = peek().offset;
      p.pred.op = index::CountOp::Between;
      p.pred.lo = count_value();
      expect_keyword("AND");
      p.pred.hi = count_value();
      if (p.pred.lo > p.pred.hi)
        throw ParseError(ParseError::Kind::InvalidValue, at,
                         "BETWEEN bounds are reversed: " + std::to_string(p.pred.lo) + " > " +
                             std::to_string(p.pred.hi));
      return p;
    }
    if (peek().kind != Tok::Cmp) fail("expected a comparison (=, <, <=, >, >=) or BETWEEN");
    const std::string op = next().text;
    if (op == "=") p.pred.op = index::CountOp::Eq;
    else if (op == "<") p.pred.op = index::CountOp::Lt;
    else if (op == "<=") p.pred.op = index::CountOp::Le;
    else if (op == ">") p.pred.op = index::CountOp::Gt;
    else p.pred.op = index::CountOp::Ge;
    p.pred.lo = count_value();
    return p;
  }

  // ", name=value" pairs after the first argument of similar_to / intent.
  template <class F>
  void named_args(F&& on_arg) {
    while (peek().kind == Tok::Comma) {
      ++pos_;
      const Token& name = peek();
      if (name.kind != Tok::Ident) fail("expected an argument name");
      ++pos_;
      if (peek().kind != Tok::Cmp || peek().text != "=") fail("expected '=' after " + name.text);
      ++pos_;
      on_arg(name);
    }
    expect(Tok::RParen, "')'");
  }

  Clause clause() {
    if (accept_keyword("NOT")) {
      if (!is_keyword(peek(), "count") && !is_keyword(peek(), "has"))
        fail("NOT applies only to count(...) and has(...)");
      return predicate(true);
    }
    if (is_keyword(peek(), "count") || is_keyword(peek(), "has")) return predicate(false);
    if (accept_keyword("similar_to")) {
      expect(Tok::LParen, "'('");
      SimilarTo s;
      s.ref = string_arg("reference");
      bool mode_seen = false, weight_seen = false;
      named_args([&](const Token& name) {
        if (ieq(name.text, "mode") && !mode_seen) {
          const Token& v = peek();
          if (v.kind != Tok::Ident) fail("expected structural, visual or semantic");
          if (ieq(v.text, "structural")) s.mode = Mode::Structural;
          else if (ieq(v.text, "visual")) s.mode = Mode::Visual;
          else if (ieq(v.text, "semantic")) s.mode = Mode::Semantic;
          else
            throw ParseError(ParseError::Kind::InvalidValue, v.offset,
                             "unknown mode '" + v.text + "'; expected structural, visual or semantic");
          ++pos_;
          mode_seen = true;
        } else if (ieq(name.text, "weight") && !weight_seen) {
          s.weight = weight();
          weight_seen = true;
        } else {
          throw ParseError(ParseError::Kind::Syntax, name.offset,
                           "unexpected or repeated argument '" + name.text + "' to similar_to");
        }
      });
      return s;
    }
    if (accept_keyword("intent")) {
      expect(Tok::LParen, "'('");
      IntentClause c;
      c.label = string_arg("intent label");
      named_args([&](const Token& name) {
        if (!ieq(name.text, "weight") || c.weight)
          throw ParseError(ParseError::Kind::Syntax, name.offset,
                           "unexpected or repeated argument '" + name.text + "' to intent");
        c.weight = weight();
      });
      return c;
    }
    if (accept_keyword("text")) {
      expect(Tok::Tilde, "'~'");
      TextMatch t;
      t.text = string_arg("text");
      if (peek().kind == Tok::LParen) {
        ++pos_;
        expect_keyword("weight");
        if (peek().kind != Tok::Cmp || peek().text != "=") fail("expected '='");
        ++pos_;
        t.weight = weight();
        expect(Tok::RParen, "')'");
      }
      return t;
    }
    fail("expected a clause (count, has, similar_to, intent, text)");
  }

  std::vector<Token> toks_;
  std::size_t pos_ = 0;
};

std::string quote(std::string_view s) {
  std::string out = "\"";
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      default: out += c;
    }
  }
  return out + "\"";
}

std::string fmt_double(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::string type_arg(const std::optional<graph::ElementType>& t) {
  return t ? std::string(graph::type_name(*t)) : "any";
}

struct Printer {
  std::string operator()(const Predicate& p) const {
    std::string s = p.negated ? "NOT " : "";
    const auto& m = p.pred;
    if (m.op == index::CountOp::Has) return s + "has(" + type_arg(m.type) + ")";
    if (m.op == index::CountOp::NotHas) return s + "count(" + type_arg(m.type) + ") = 0";
    s += "count(" + type_arg(m.type) + ") ";
    if (m.op == index::CountOp::Between)
      return s + "BETWEEN " + std::to_string(m.lo) + " AND " + std::to_string(m.hi);
    return s + std::string(index::count_op_name(m.op)) + " " + std::to_string(m.lo);
  }
  std::string operator()(const SimilarTo& c) const {
    std::string s = "similar_to(" + quote(c.ref) + ", mode=" + std::string(mode_name(c.mode));
    if (c.weight) s += ", weight=" + fmt_double(*c.weight);
    return s + ")";
  }
  std::string operator()(const IntentClause& c) const {
    std::string s = "intent(" + quote(c.label);
    if (c.weight) s += ", weight=" + fmt_double(*c.weight);
    return s + ")";
  }
  std::string operator()(const TextMatch& c) const {
    std::string s = "text ~ " + quote(c.text);
    if (c.weight) s += " (weight=" + fmt_double(*c.weight) + ")";
    return s;
  }
};

}  // namespace

ParseError::ParseError(Kind kind, std::size_t offset, const std::string& message)
    : std::runtime_error("at byte " + std::to_string(offset) + ": " + message),
      kind_(kind),
      offset_(offset),
      detail_(message) {}

std::string_view mode_name(Mode m) {
  switch (m) {
    case Mode::Structural: return "structural";
    case Mode::Visual: return "visual";
    case Mode::Semantic: return "semantic";
  }
  return "?";
}

std::vector<Predicate> QueryAst::predicates() const {
  std::vector<Predicate> out;
  for (const auto& c : clauses)
    if (auto* p = std::get_if<Predicate>(&c)) out.push_back(*p);
  return out;
}

bool QueryAst::has_scoring() const {
  return std::any_of(clauses.begin(), clauses.end(),
                     [](const Clause& c) { return !std::holds_alternative<Predicate>(c); });
}

QueryAst parse(std::string_view text) { return Parser(text).run(); }

std::string print(const QueryAst& ast) {
  std::string s = "FIND";
  for (std::size_t i = 0; i < ast.clauses.size(); ++i) {
    s += i == 0 ? " WHERE " : " AND ";
    s += std::visit(Printer{}, ast.clauses[i]);
  }
  return s + " ORDER BY score DESC LIMIT " + std::to_string(ast.limit);
}

}  // namespace uisearch::query
