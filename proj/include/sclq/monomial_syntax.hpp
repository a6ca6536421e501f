#ifndef SCLQ_MONOMIAL_SYNTAX_HPP
#define SCLQ_MONOMIAL_SYNTAX_HPP

// Plain-text polynomial syntax shared by Observable and PolynomialObservable:
//   "2 q^2 p - 0.5 p^3 + 1/3 i q"
// Coefficients are kept as exact decimal fractions (numerator/denominator
// digit strings) so that callers can choose rational or floating arithmetic.

#include <cctype>
#include <string>
#include <vector>

#include "errors.hpp"

namespace sclq::syntax {

struct RawMonomial {
    bool negative = false;
    std::string num = "1";   // decimal digits, no sign
    std::string den = "1";
    bool imaginary = false;  // coefficient multiplied by i
    int qdeg = 0;
    int pdeg = 0;
};

namespace detail {

inline std::string strip_zeros(std::string s) {
    std::size_t k = 0;
    while (k + 1 < s.size() && s[k] == '0') ++k;
    return s.substr(k);
}

inline void scale_pow10(std::string& digits, int e) {
    for (int k = 0; k < e; ++k) digits.push_back('0');
}

class Parser {
public:
    explicit Parser(const std::string& s) : s_(s) {}

    std::vector<RawMonomial> run() {
        std::vector<RawMonomial> out;
        skip();
        if (pos_ == s_.size()) throw ParseError("empty polynomial");
        bool first = true;
        while (true) {
            skip();
            if (pos_ == s_.size()) break;
            RawMonomial m;
            if (peek() == '+' || peek() == '-') {
                m.negative = (peek() == '-');
                ++pos_;
                skip();
            } else if (!first) {
                fail("expected '+' or '-'");
            }
            term(m);
            out.push_back(m);
            first = false;
        }
        return out;
    }

private:
    const std::string& s_;
    std::size_t pos_ = 0;

    char peek() const { return pos_ < s_.size() ? s_[pos_] : '\0'; }
    void skip() {
        while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
    }
    [[noreturn]] void fail(const std::string& what) const {
        throw ParseError(what + " at column " + std::to_string(pos_ + 1) + " in '" + s_ + "'");
    }

    void term(RawMonomial& m) {
        bool any = false;
        bool had_number = false;
        while (true) {
            skip();
            char c = peek();
            if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
                if (had_number) fail("two numeric coefficients in one term");
                number(m);
                had_number = true;
            } else if (c == 'q' || c == 'p') {
                ++pos_;
                int e = 1;
                skip();
                if (peek() == '^') {
                    ++pos_;
                    skip();
                    e = integer();
                }
                (c == 'q' ? m.qdeg : m.pdeg) += e;
            } else if (c == 'i') {
                if (m.imaginary) fail("repeated imaginary unit");
                ++pos_;
                m.imaginary = true;
            } else if (c == '*') {
                if (!any) fail("dangling '*'");
                ++pos_;
                continue;
            } else {
                break;
            }
            any = true;
        }
        if (!any) fail("expected a term");
    }

    int integer() {
        std::size_t start = pos_;
        while (std::isdigit(static_cast<unsigned char>(peek()))) ++pos_;
        if (start == pos_) fail("expected an integer exponent");
        return std::stoi(s_.substr(start, pos_ - start));
    }

    void number(RawMonomial& m) {
        std::string intpart, frac;
        while (std::isdigit(static_cast<unsigned char>(peek()))) intpart.push_back(s_[pos_++]);
        if (peek() == '.') {
            ++pos_;
            while (std::isdigit(static_cast<unsigned char>(peek()))) frac.push_back(s_[pos_++]);
        }
        if (intpart.empty() && frac.empty()) fail("malformed number");
        int exp10 = 0;
        if (peek() == 'e' || peek() == 'E') {
            ++pos_;
            bool neg = false;
            if (peek() == '+' || peek() == '-') neg = (s_[pos_++] == '-');
            exp10 = neg ? -integer() : integer();
        }
        std::string num = intpart + frac;
        std::string den = "1";
        scale_pow10(den, static_cast<int>(frac.size()));
        if (exp10 > 0) scale_pow10(num, exp10);
        if (exp10 < 0) scale_pow10(den, -exp10);
        skip();
        if (peek() == '/') {
            ++pos_;
            skip();
            std::size_t start = pos_;
            while (std::isdigit(static_cast<unsigned char>(peek()))) ++pos_;
            if (start == pos_) fail("expected a denominator");
            std::string d = s_.substr(start, pos_ - start);
            // (num/den)/d
            if (strip_zeros(d) == "0") fail("zero denominator");
            den = multiply(den, d);
        }
        m.num = strip_zeros(num);
        m.den = strip_zeros(den);
    }

    static std::string multiply(const std::string& a, const std::string& b) {
        std::vector<int> r(a.size() + b.size(), 0);
        for (int i = static_cast<int>(a.size()) - 1; i >= 0; --i)
            for (int j = static_cast<int>(b.size()) - 1; j >= 0; --j) {
                int k = i + j + 1;
                r[k] += (a[i] - '0') * (b[j] - '0');
                r[k - 1] += r[k] / 10;
                r[k] %= 10;
            }
        std::string out;
        for (int d : r) out.push_back(static_cast<char>('0' + d));
        return strip_zeros(out);
    }
};

} // namespace detail

inline std::vector<RawMonomial> parse(const std::string& text) {
    return detail::Parser(text).run();
}

} // namespace sclq::syntax

#endif
