#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "segkit/error.hpp"

// Configuration values and a YAML-compatible subset: block mappings and
// sequences, flow sequences/mappings, plain and quoted scalars, comments.
// Anchors, aliases, tags, and block scalars are rejected.
namespace segkit::config {

struct Location {
  std::size_t line = 0;
  std::size_t column = 0;
};

class Value {
 public:
  using Sequence = std::vector<Value>;
  using Mapping = std::vector<std::pair<std::string, Value>>;

  Value() = default;
  Value(std::nullptr_t) {}
  Value(bool b) : data_(b) {}
  Value(int i) : data_(static_cast<std::int64_t>(i)) {}
  Value(std::int64_t i) : data_(i) {}
  Value(std::uint64_t i) : data_(static_cast<std::int64_t>(i)) {}
  Value(double d) : data_(d) {}
  Value(const char* s) : data_(std::string(s)) {}
  Value(std::string s) : data_(std::move(s)) {}
  Value(Sequence s) : data_(std::move(s)) {}
  Value(Mapping m) : data_(std::move(m)) {}

  static Value mapping() { return Value(Mapping{}); }
  static Value sequence() { return Value(Sequence{}); }

  bool is_null() const { return std::holds_alternative<std::monostate>(data_); }
  bool is_bool() const { return std::holds_alternative<bool>(data_); }
  bool is_int() const { return std::holds_alternative<std::int64_t>(data_); }
  bool is_real() const { return std::holds_alternative<double>(data_); }
  bool is_number() const { return is_int() || is_real(); }
  bool is_string() const { return std::holds_alternative<std::string>(data_); }
  bool is_sequence() const { return std::holds_alternative<Sequence>(data_); }
  bool is_mapping() const { return std::holds_alternative<Mapping>(data_); }
  bool is_scalar() const { return !is_sequence() && !is_mapping(); }

  std::string type_name() const {
    static constexpr const char* names[] = {"null", "bool", "integer", "float", "string", "sequence", "mapping"};
    return names[data_.index()];
  }

  bool as_bool() const { return get<bool>("bool"); }
  std::int64_t as_int() const {
    if (is_real()) {
      const double d = std::get<double>(data_);
      if (d == static_cast<double>(static_cast<std::int64_t>(d))) return static_cast<std::int64_t>(d);
    }
    return get<std::int64_t>("integer");
  }
  double as_double() const {
    if (is_int()) return static_cast<double>(std::get<std::int64_t>(data_));
    return get<double>("number");
  }
  const std::string& as_string() const { return get<std::string>("string"); }
  const Sequence& as_sequence() const { return get<Sequence>("sequence"); }
  Sequence& as_sequence() { return get_mut<Sequence>("sequence"); }
  const Mapping& as_mapping() const { return get<Mapping>("mapping"); }
  Mapping& as_mapping() { return get_mut<Mapping>("mapping"); }

  const Value* find(std::string_view key) const {
    if (!is_mapping()) return nullptr;
    for (const auto& [k, v] : std::get<Mapping>(data_))
      if (k == key) return &v;
    return nullptr;
  }
  Value* find(std::string_view key) {
    if (!is_mapping()) return nullptr;
    for (auto& [k, v] : std::get<Mapping>(data_))
      if (k == key) return &v;
    return nullptr;
  }

  // Inserts or replaces, keeping first-insertion order.
  Value& set(std::string key, Value v) {
    if (Value* existing = find(key)) {
      *existing = std::move(v);
      return *existing;
    }
    auto& m = as_mapping();
    m.emplace_back(std::move(key), std::move(v));
    return m.back().second;
  }

  Location location() const { return loc_; }
  void set_location(Location loc) { loc_ = loc; }

  // Structural equality; locations are ignored.
  friend bool operator==(const Value& a, const Value& b) { return a.data_ == b.data_; }

 private:
  template <typename U>
  const U& get(const char* want) const {
    if (const U* p = std::get_if<U>(&data_)) return *p;
    throw ConfigError(where() + "expected " + want + ", found " + type_name());
  }
  template <typename U>
  U& get_mut(const char* want) {
    if (U* p = std::get_if<U>(&data_)) return *p;
    throw ConfigError(where() + "expected " + want + ", found " + type_name());
  }
  std::string where() const {
    if (loc_.line == 0) return "";
    return "line " + std::to_string(loc_.line) + ":" + std::to_string(loc_.column) + ": ";
  }

  std::variant<std::monostate, bool, std::int64_t, double, std::string, Sequence, Mapping> data_;
  Location loc_;
};

class ParseError : public ConfigError {
 public:
  ParseError(const std::string& source, Location loc, const std::string& message)
      : ConfigError(source + ":" + std::to_string(loc.line) + ":" + std::to_string(loc.column) + ": " + message),
        loc_(loc) {}
  Location location() const { return loc_; }

 private:
  Location loc_;
};

namespace detail {

inline bool is_int_literal(std::string_view s) {
  std::size_t i = (!s.empty() && (s[0] == '-' || s[0] == '+')) ? 1 : 0;
  if (i >= s.size()) return false;
  for (; i < s.size(); ++i)
    if (s[i] < '0' || s[i] > '9') return false;
  return true;
}

inline bool parse_real(std::string_view s, double& out) {
  if (s.empty()) return false;
  std::string_view body = s;
  if (body[0] == '+') body.remove_prefix(1);
  bool has_digit = false;
  for (char c : body) {
    if (c >= '0' && c <= '9') has_digit = true;
    else if (c != '.' && c != 'e' && c != 'E' && c != '-' && c != '+') return false;
  }
  if (!has_digit) return false;
  auto [ptr, ec] = std::from_chars(body.data(), body.data() + body.size(), out);
  return ec == std::errc() && ptr == body.data() + body.size();
}

// Interprets an unquoted scalar.
inline Value resolve_plain(std::string_view s) {
  if (s.empty() || s == "~" || s == "null" || s == "Null" || s == "NULL") return Value();
  if (s == "true" || s == "True" || s == "TRUE") return Value(true);
  if (s == "false" || s == "False" || s == "FALSE") return Value(false);
  if (is_int_literal(s)) {
    std::int64_t v = 0;
    std::string_view body = s[0] == '+' ? s.substr(1) : s;
    auto [ptr, ec] = std::from_chars(body.data(), body.data() + body.size(), v);
    if (ec == std::errc() && ptr == body.data() + body.size()) return Value(v);
  }
  double d = 0;
  if (parse_real(s, d)) return Value(d);
  if (s == ".inf" || s == ".Inf") return Value(std::numeric_limits<double>::infinity());
  if (s == "-.inf" || s == "-.Inf") return Value(-std::numeric_limits<double>::infinity());
  return Value(std::string(s));
}

struct Line {
  std::size_t number;
  std::size_t indent;
  std::string text;  // content after indentation, comments and trailing blanks removed
};

class Parser {
 public:
  Parser(std::string source, std::string_view text) : source_(std::move(source)) { split(text); }

  Value parse_document() {
    if (lines_.empty()) return Value::mapping();
    Value v = parse_block(lines_[0].indent);
    if (pos_ < lines_.size()) fail(lines_[pos_], lines_[pos_].indent, "unexpected content (check indentation)");
    return v;
  }

  // Parses a single inline value such as an override right-hand side.
  Value parse_inline(std::string_view text, std::size_t line) {
    Line l{line, 0, std::string(text)};
    std::size_t i = 0;
    Value v = parse_flow_value(l, i, false);
    skip_spaces(l.text, i);
    if (i != l.text.size()) fail(l, i, "trailing characters after value");
    return v;
  }

 private:
  [[noreturn]] void fail(const Line& line, std::size_t col, const std::string& msg) const {
    throw ParseError(source_, {line.number, line.indent + col + 1}, msg);
  }

  void split(std::string_view text) {
    std::size_t number = 0;
    std::size_t start = 0;
    bool first = true;
    while (start <= text.size()) {
      std::size_t end = text.find('\n', start);
      if (end == std::string_view::npos) end = text.size();
      std::string raw(text.substr(start, end - start));
      ++number;
      start = end + 1;
      if (!raw.empty() && raw.back() == '\r') raw.pop_back();
      std::size_t indent = 0;
      while (indent < raw.size() && (raw[indent] == ' ' || raw[indent] == '\t')) {
        if (raw[indent] == '\t') throw ParseError(source_, {number, indent + 1}, "tab characters are not allowed in indentation");
        ++indent;
      }
      std::string body = strip_comment(raw.substr(indent));
      while (!body.empty() && (body.back() == ' ' || body.back() == '\t')) body.pop_back();
      if (body.empty()) {
        if (end == text.size()) break;
        continue;
      }
      if (first && body == "---") {
        first = false;
        continue;
      }
      first = false;
      if (body == "..." ) break;
      lines_.push_back(Line{number, indent, std::move(body)});
      if (end == text.size()) break;
    }
  }

  static std::string strip_comment(const std::string& s) {
    char quote = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const char c = s[i];
      if (quote) {
        if (c == '\\' && quote == '"') ++i;
        else if (c == quote) quote = 0;
      } else if (c == '"' || c == '\'') {
        if (i == 0 || s[i - 1] == ' ' || s[i - 1] == '[' || s[i - 1] == '{' || s[i - 1] == ',' || s[i - 1] == ':')
          quote = c;
      } else if (c == '#' && (i == 0 || s[i - 1] == ' ')) {
        return s.substr(0, i);
      }
    }
    return s;
  }

  static bool is_seq_item(const std::string& t) { return t == "-" || (t.size() > 1 && t[0] == '-' && t[1] == ' '); }

  // Position of the ':' separating a block mapping key, or npos.
  static std::size_t key_colon(const std::string& t) {
    if (t.empty() || t[0] == '[' || t[0] == '{') return std::string::npos;
    std::size_t i = 0;
    if (t[0] == '"' || t[0] == '\'') {
      const char q = t[0];
      for (i = 1; i < t.size(); ++i) {
        if (q == '"' && t[i] == '\\') {
          ++i;
          continue;
        }
        if (t[i] == q) {
          if (q == '\'' && i + 1 < t.size() && t[i + 1] == '\'') {
            ++i;
            continue;
          }
          break;
        }
      }
      ++i;
      if (i < t.size() && t[i] == ':' && (i + 1 == t.size() || t[i + 1] == ' ')) return i;
      return std::string::npos;
    }
    for (; i < t.size(); ++i)
      if (t[i] == ':' && (i + 1 == t.size() || t[i + 1] == ' ')) return i;
    return std::string::npos;
  }

  Value parse_block(std::size_t indent) {
    const Line& head = lines_[pos_];
    if (is_seq_item(head.text)) return parse_sequence(indent);
    if (key_colon(head.text) != std::string::npos) return parse_mapping(indent);
    // A lone scalar document.
    std::size_t i = 0;
    Line l = head;
    ++pos_;
    Value v = parse_flow_value(l, i, false);
    skip_spaces(l.text, i);
    if (i != l.text.size()) fail(l, i, "trailing characters after value");
    return v;
  }

  Value parse_mapping(std::size_t indent) {
    Value out = Value::mapping();
    out.set_location({lines_[pos_].number, lines_[pos_].indent + 1});
    while (pos_ < lines_.size() && lines_[pos_].indent == indent) {
      Line line = lines_[pos_];
      if (is_seq_item(line.text)) fail(line, 0, "sequence item where a mapping key was expected");
      const std::size_t colon = key_colon(line.text);
      if (colon == std::string::npos) fail(line, 0, "expected 'key: value'");
      std::string key = parse_key(line, colon);
      if (out.find(key)) fail(line, 0, "duplicate key '" + key + "'");
      std::size_t i = colon + 1;
      skip_spaces(line.text, i);
      ++pos_;
      Value v;
      if (i < line.text.size()) {
        v = parse_flow_value(line, i, false);
        skip_spaces(line.text, i);
        if (i != line.text.size()) fail(line, i, "trailing characters after value");
      } else if (pos_ < lines_.size() && lines_[pos_].indent > indent) {
        v = parse_block(lines_[pos_].indent);
      } else if (pos_ < lines_.size() && lines_[pos_].indent == indent && is_seq_item(lines_[pos_].text)) {
        v = parse_sequence(indent);
      } else {
        v.set_location({line.number, line.indent + colon + 1});
      }
      out.set(std::move(key), std::move(v));
    }
    if (pos_ < lines_.size() && lines_[pos_].indent > indent) fail(lines_[pos_], 0, "unexpected indentation");
    return out;
  }

  Value parse_sequence(std::size_t indent) {
    Value out = Value::sequence();
    out.set_location({lines_[pos_].number, lines_[pos_].indent + 1});
    while (pos_ < lines_.size() && lines_[pos_].indent == indent && is_seq_item(lines_[pos_].text)) {
      Line& line = lines_[pos_];
      std::size_t i = 1;
      skip_spaces(line.text, i);
      if (i >= line.text.size()) {
        ++pos_;
        if (pos_ < lines_.size() && lines_[pos_].indent > indent) out.as_sequence().push_back(parse_block(lines_[pos_].indent));
        else out.as_sequence().push_back(Value());
        continue;
      }
      const std::string rest = line.text.substr(i);
      if (key_colon(rest) != std::string::npos) {
        // "- key: value" opens a mapping whose keys align with `key`.
        line.text = rest;
        line.indent += i;
        out.as_sequence().push_back(parse_mapping(line.indent));
        continue;
      }
      Line copy = line;
      ++pos_;
      Value v = parse_flow_value(copy, i, false);
      skip_spaces(copy.text, i);
      if (i != copy.text.size()) fail(copy, i, "trailing characters after value");
      out.as_sequence().push_back(std::move(v));
    }
    if (pos_ < lines_.size() && lines_[pos_].indent > indent) fail(lines_[pos_], 0, "unexpected indentation");
    return out;
  }

  std::string parse_key(const Line& line, std::size_t colon) {
    std::size_t i = 0;
    const std::string& t = line.text;
    if (t[0] == '"' || t[0] == '\'') {
      Value v = parse_quoted(line, i);
      return v.as_string();
    }
    std::string key = t.substr(0, colon);
    while (!key.empty() && key.back() == ' ') key.pop_back();
    if (key.empty()) fail(line, 0, "empty mapping key");
    check_plain_start(line, 0);
    return key;
  }

  static void skip_spaces(const std::string& t, std::size_t& i) {
    while (i < t.size() && t[i] == ' ') ++i;
  }

  void check_plain_start(const Line& line, std::size_t i) {
    const char c = line.text[i];
    if (c == '&' || c == '*') fail(line, i, "anchors and aliases are not supported");
    if (c == '!') fail(line, i, "tags are not supported");
    if (c == '|' || c == '>') fail(line, i, "block scalars are not supported");
    if (c == '@' || c == '`') fail(line, i, "reserved indicator '" + std::string(1, c) + "'");
  }

  Value parse_flow_value(const Line& line, std::size_t& i, bool in_flow) {
    const std::string& t = line.text;
    skip_spaces(t, i);
    if (i >= t.size()) fail(line, i, "missing value");
    const Location loc{line.number, line.indent + i + 1};
    Value v;
    if (t[i] == '[') {
      v = Value::sequence();
      ++i;
      skip_spaces(t, i);
      if (i < t.size() && t[i] == ']') {
        ++i;
      } else {
        while (true) {
          v.as_sequence().push_back(parse_flow_value(line, i, true));
          skip_spaces(t, i);
          if (i < t.size() && t[i] == ',') {
            ++i;
            continue;
          }
          if (i < t.size() && t[i] == ']') {
            ++i;
            break;
          }
          fail(line, i, "expected ',' or ']' in flow sequence");
        }
      }
    } else if (t[i] == '{') {
      v = Value::mapping();
      ++i;
      skip_spaces(t, i);
      if (i < t.size() && t[i] == '}') {
        ++i;
      } else {
        while (true) {
          skip_spaces(t, i);
          std::string key;
          if (i < t.size() && (t[i] == '"' || t[i] == '\'')) {
            key = parse_quoted(line, i).as_string();
          } else {
            const std::size_t start = i;
            while (i < t.size() && t[i] != ':' && t[i] != ',' && t[i] != '}') ++i;
            key = t.substr(start, i - start);
            while (!key.empty() && key.back() == ' ') key.pop_back();
          }
          skip_spaces(t, i);
          if (i >= t.size() || t[i] != ':') fail(line, i, "expected ':' in flow mapping");
          ++i;
          if (key.empty()) fail(line, i, "empty mapping key");
          if (v.find(key)) fail(line, i, "duplicate key '" + key + "'");
          v.set(key, parse_flow_value(line, i, true));
          skip_spaces(t, i);
          if (i < t.size() && t[i] == ',') {
            ++i;
            continue;
          }
          if (i < t.size() && t[i] == '}') {
            ++i;
            break;
          }
          fail(line, i, "expected ',' or '}' in flow mapping");
        }
      }
    } else if (t[i] == '"' || t[i] == '\'') {
      v = parse_quoted(line, i);
    } else {
      check_plain_start(line, i);
      const std::size_t start = i;
      if (in_flow) {
        while (i < t.size() && t[i] != ',' && t[i] != ']' && t[i] != '}') ++i;
      } else {
        i = t.size();
      }
      std::string plain = t.substr(start, i - start);
      while (!plain.empty() && plain.back() == ' ') plain.pop_back();
      if (!in_flow && key_colon(plain) != std::string::npos) fail(line, start, "nested mapping must start on its own line");
      v = resolve_plain(plain);
    }
    v.set_location(loc);
    return v;
  }

  Value parse_quoted(const Line& line, std::size_t& i) {
    const std::string& t = line.text;
    const char q = t[i];
    const std::size_t start = i;
    ++i;
    std::string out;
    while (true) {
      if (i >= t.size()) fail(line, start, "unterminated quoted string");
      const char c = t[i];
      if (q == '"' && c == '\\') {
        if (i + 1 >= t.size()) fail(line, i, "dangling escape");
        const char e = t[i + 1];
        switch (e) {
          case 'n': out += '\n'; break;
          case 't': out += '\t'; break;
          case '\\': out += '\\'; break;
          case '"': out += '"'; break;
          case '0': out += '\0'; break;
          default: fail(line, i, std::string("unsupported escape '\\") + e + "'");
        }
        i += 2;
        continue;
      }
      if (c == q) {
        if (q == '\'' && i + 1 < t.size() && t[i + 1] == '\'') {
          out += '\'';
          i += 2;
          continue;
        }
        ++i;
        break;
      }
      out += c;
      ++i;
    }
    return Value(std::move(out));
  }

  std::string source_;
  std::vector<Line> lines_;
  std::size_t pos_ = 0;
};

inline bool needs_quotes(const std::string& s) {
  if (s.empty()) return true;
  if (!resolve_plain(s).is_string()) return true;
  if (s.front() == ' ' || s.back() == ' ') return true;
  static constexpr std::string_view specials = ":#,[]{}&*!|>'\"%@`\n\t\\";
  if (s.find_first_of(specials) != std::string::npos) return true;
  return s[0] == '-' || s[0] == '?';
}

inline std::string quote(const std::string& s) {
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
  return out + '"';
}

inline std::string emit_scalar(const Value& v) {
  if (v.is_null()) return "null";
  if (v.is_bool()) return v.as_bool() ? "true" : "false";
  if (v.is_int()) return std::to_string(v.as_int());
  if (v.is_real()) {
    const double d = v.as_double();
    if (d == std::numeric_limits<double>::infinity()) return ".inf";
    if (d == -std::numeric_limits<double>::infinity()) return "-.inf";
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, d);
    std::string s(buf, ptr);
    if (s.find_first_of(".eE") == std::string::npos) s += ".0";
    return s;
  }
  const std::string& s = v.as_string();
  return needs_quotes(s) ? quote(s) : s;
}

inline std::string emit_key(const std::string& k) { return needs_quotes(k) ? quote(k) : k; }

inline bool flowable(const Value& v) {
  if (v.is_scalar()) return true;
  if (v.is_sequence()) {
    for (const auto& e : v.as_sequence())
      if (!e.is_scalar()) return false;
    return true;
  }
  return v.as_mapping().empty();
}

inline std::string emit_flow(const Value& v) {
  if (v.is_scalar()) return emit_scalar(v);
  if (v.is_mapping()) return "{}";
  std::string out = "[";
  const auto& seq = v.as_sequence();
  for (std::size_t i = 0; i < seq.size(); ++i) out += (i ? ", " : "") + emit_scalar(seq[i]);
  return out + "]";
}

inline void emit_block(std::ostream& os, const Value& v, std::size_t indent);

inline void emit_mapping_entries(std::ostream& os, const Value::Mapping& m, std::size_t indent, bool first_inline) {
  const std::string pad(indent, ' ');
  bool first = true;
  for (const auto& [k, val] : m) {
    if (!(first && first_inline)) os << pad;
    first = false;
    os << emit_key(k) << ':';
    if (flowable(val)) {
      os << ' ' << emit_flow(val) << '\n';
    } else if (val.is_mapping()) {
      os << '\n';
      emit_block(os, val, indent + 2);
    } else {
      os << '\n';
      emit_block(os, val, indent + 2);
    }
  }
}

inline void emit_block(std::ostream& os, const Value& v, std::size_t indent) {
  const std::string pad(indent, ' ');
  if (v.is_mapping()) {
    emit_mapping_entries(os, v.as_mapping(), indent, false);
    return;
  }
  if (v.is_sequence()) {
    for (const auto& item : v.as_sequence()) {
      os << pad << '-';
      if (flowable(item)) {
        os << ' ' << emit_flow(item) << '\n';
      } else if (item.is_mapping()) {
        os << ' ';
        emit_mapping_entries(os, item.as_mapping(), indent + 2, true);
      } else {
        os << '\n';
        emit_block(os, item, indent + 2);
      }
    }
    return;
  }
  os << pad << emit_scalar(v) << '\n';
}

}  // namespace detail

inline Value parse(std::string_view text, const std::string& source = "<config>") {
  return detail::Parser(source, text).parse_document();
}

inline Value parse_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw EnvironmentError("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

// Canonical block-style text; parse(emit(v)) == v.
inline std::string emit(const Value& v) {
  std::ostringstream os;
  if (v.is_mapping() && v.as_mapping().empty()) return "{}\n";
  detail::emit_block(os, v, 0);
  return os.str();
}

/// Applies "a.b.c=value", creating intermediate mappings as needed. The value
/// is parsed as an inline YAML scalar or flow collection.
inline void apply_override(Value& root, std::string_view assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' must have the form key.path=value");
  }
  const std::string path(assignment.substr(0, eq));
  Value value = detail::Parser("<override " + path + ">", "").parse_inline(assignment.substr(eq + 1), 1);
  if (!root.is_mapping()) root = Value::mapping();
  Value* node = &root;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override path '" + path + "' has an empty component");
    if (dot == std::string::npos) {
      node->set(key, std::move(value));
      return;
    }
    Value* next = node->find(key);
    if (!next) {
      next = &node->set(key, Value::mapping());
    } else if (next->is_string() || next->is_null()) {
      // Scalar shorthand such as "model: fcn" expands to {type: fcn}.
      Value expanded = Value::mapping();
      if (next->is_string()) expanded.set("type", *next);
      *next = std::move(expanded);
    } else if (!next->is_mapping()) {
      throw ConfigError("override path '" + path + "': '" + key + "' is a " + next->type_name() + ", not a mapping");
    }
    node = next;
    start = dot + 1;
  }
}

}  // namespace segkit::config
