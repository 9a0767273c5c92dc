// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

namespace lalora {

/// Ten significant digits with '.' as the decimal separator.
std::string format_real(double value);

/// RFC-4180 text: CRLF line endings, fields quoted only when they contain
/// a comma, quote, CR or LF.
class CsvWriter {
public:
    explicit CsvWriter(std::vector<std::string> header);

    void row(const std::vector<std::string>& fields);

    [[nodiscard]] const std::string& text() const noexcept { return text_; }
    [[nodiscard]] std::size_t rows() const noexcept { return rows_; }

private:
    void append(const std::vector<std::string>& fields);

    std::size_t columns_;
    std::size_t rows_ = 0;
    std::string text_;
};

/// Parses RFC-4180 text into rows of fields (header included).
std::vector<std::vector<std::string>> parse_csv(std::string_view text);

}  // namespace lalora
