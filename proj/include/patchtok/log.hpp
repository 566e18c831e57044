#pragma once

#include <string_view>

namespace patchtok {

enum class LogLevel { debug = 0, info = 1, warn = 2, quiet = 3 };

void set_log_level(LogLevel level);
LogLevel log_level();

void log_debug(std::string_view msg);
void log_info(std::string_view msg);
void log_warn(std::string_view msg);

}  // namespace patchtok
