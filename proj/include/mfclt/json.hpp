#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

namespace mfclt {

// Minimal ordered JSON value whose numbers are written with 17 significant digits.
// Non-finite numbers are written as null.
class JsonValue {
 public:
  enum class Kind { Null, Bool, Number, Integer, Unsigned, String, Array, Object };

  JsonValue() = default;
  JsonValue(std::nullptr_t) {}
  JsonValue(bool b) : kind_(Kind::Bool), bool_(b) {}
  JsonValue(double x) : kind_(Kind::Number), number_(x) {}
  JsonValue(int x) : kind_(Kind::Integer), integer_(x) {}
  JsonValue(long x) : kind_(Kind::Integer), integer_(x) {}
  JsonValue(long long x) : kind_(Kind::Integer), integer_(x) {}
  JsonValue(unsigned x) : kind_(Kind::Unsigned), unsigned_(x) {}
  JsonValue(unsigned long x) : kind_(Kind::Unsigned), unsigned_(x) {}
  JsonValue(unsigned long long x) : kind_(Kind::Unsigned), unsigned_(x) {}
  JsonValue(const char* s) : kind_(Kind::String), string_(s) {}
  JsonValue(std::string s) : kind_(Kind::String), string_(std::move(s)) {}

  static JsonValue array() {
    JsonValue v;
    v.kind_ = Kind::Array;
    return v;
  }
  static JsonValue object() {
    JsonValue v;
    v.kind_ = Kind::Object;
    return v;
  }
  template <class T>
  static JsonValue array_of(const std::vector<T>& xs) {
    JsonValue v = array();
    for (const auto& x : xs) v.push(JsonValue(x));
    return v;
  }

  Kind kind() const { return kind_; }

  JsonValue& push(JsonValue v) {
    items_.push_back(std::move(v));
    return *this;
  }
  JsonValue& set(const std::string& key, JsonValue v) {
    for (auto& [k, existing] : members_) {
      if (k == key) {
        existing = std::move(v);
        return *this;
      }
    }
    members_.emplace_back(key, std::move(v));
    return *this;
  }

  std::string dump(int indent = 2) const {
    std::string out;
    write(out, indent, 0);
    out += '\n';
    return out;
  }

 private:
  static void escape(std::string& out, const std::string& s) {
    out += '"';
    for (unsigned char c : s) {
      switch (c) {
        case '"': out += "\\\""; break;
        case '\\': out += "\\\\"; break;
        case '\n': out += "\\n"; break;
        case '\t': out += "\\t"; break;
        case '\r': out += "\\r"; break;
        default:
          if (c < 0x20) {
            char buf[8];
            std::snprintf(buf, sizeof buf, "\\u%04x", c);
            out += buf;
          } else {
            out += static_cast<char>(c);
          }
      }
    }
    out += '"';
  }

  void write(std::string& out, int indent, int depth) const {
    const std::string pad(static_cast<std::size_t>(indent * (depth + 1)), ' ');
    const std::string close(static_cast<std::size_t>(indent * depth), ' ');
    switch (kind_) {
      case Kind::Null: out += "null"; break;
      case Kind::Bool: out += bool_ ? "true" : "false"; break;
      case Kind::Number: {
        if (!std::isfinite(number_)) {
          out += "null";
        } else {
          char buf[32];
          std::snprintf(buf, sizeof buf, "%.17g", number_);
          out += buf;
        }
        break;
      }
      case Kind::Integer: out += std::to_string(integer_); break;
      case Kind::Unsigned: out += std::to_string(unsigned_); break;
      case Kind::String: escape(out, string_); break;
      case Kind::Array: {
        if (items_.empty()) {
          out += "[]";
          break;
        }
        // Arrays of scalars stay on one line.
        bool flat = true;
        for (const auto& item : items_) flat = flat && item.kind_ != Kind::Array && item.kind_ != Kind::Object;
        out += '[';
        for (std::size_t i = 0; i < items_.size(); ++i) {
          if (i > 0) out += flat ? ", " : ",";
          if (!flat) out += "\n" + pad;
          items_[i].write(out, indent, depth + 1);
        }
        if (!flat) out += "\n" + close;
        out += ']';
        break;
      }
      case Kind::Object: {
        if (members_.empty()) {
          out += "{}";
          break;
        }
        out += '{';
        for (std::size_t i = 0; i < members_.size(); ++i) {
          if (i > 0) out += ',';
          out += "\n" + pad;
          escape(out, members_[i].first);
          out += ": ";
          members_[i].second.write(out, indent, depth + 1);
        }
        out += "\n" + close + "}";
        break;
      }
    }
  }

  Kind kind_ = Kind::Null;
  bool bool_ = false;
  double number_ = 0.0;
  long long integer_ = 0;
  unsigned long long unsigned_ = 0;
  std::string string_;
  std::vector<JsonValue> items_;
  std::vector<std::pair<std::string, JsonValue>> members_;
};

}  // namespace mfclt
