#include "ykd/config.hpp"

#include <fstream>
#include <sstream>

#include "ykd/common.hpp"

namespace ykd {

std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream f(path);
  YKD_CHECK(f.good(), "read_config_file: cannot open ", path);
  std::map<std::string, std::string> kv;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    auto last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);
    auto eq = line.find('=');
    YKD_CHECK(eq != std::string::npos, path, ":", line_no, ": expected key=value");
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    auto trim = [](std::string s) {
      auto a = s.find_first_not_of(" \t");
      auto b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    key = trim(key);
    value = trim(value);
    YKD_CHECK(!key.empty(), path, ":", line_no, ": empty key");
    kv[key] = value;
  }
  return kv;
}

namespace {

int to_int(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    int out = std::stoi(v, &used);
    YKD_CHECK(used == v.size(), "config: ", key, ": trailing characters in \"", v, "\"");
    return out;
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
    fail("config: ", key, ": expected integer, got \"", v, "\"");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    double out = std::stod(v, &used);
    YKD_CHECK(used == v.size(), "config: ", key, ": trailing characters in \"", v, "\"");
    return out;
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
    fail("config: ", key, ": expected number, got \"", v, "\"");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  fail("config: ", key, ": expected boolean, got \"", v, "\"");
}

}  // namespace

void apply_config(const std::map<std::string, std::string>& kv, TrainConfig& cfg) {
  for (const auto& [key, v] : kv) {
    if (key == "mode") {
      cfg.mode = parse_train_mode(v);
    } else if (key == "epochs") {
      cfg.epochs = to_int(key, v);
    } else if (key == "batch_size") {
      cfg.batch_size = to_int(key, v);
    } else if (key == "lr") {
      cfg.lr = to_double(key, v);
    } else if (key == "momentum") {
      cfg.momentum = to_double(key, v);
    } else if (key == "lr_decay_epochs") {
      cfg.lr_decay_epochs = to_int(key, v);
    } else if (key == "lr_decay_factor") {
      cfg.lr_decay_factor = to_double(key, v);
    } else if (key == "seed") {
      cfg.seed = static_cast<uint64_t>(to_int(key, v));
    } else if (key == "lambda1") {
      cfg.kd.lambda1 = to_double(key, v);
    } else if (key == "lambda2") {
      cfg.kd.lambda2 = to_double(key, v);
    } else if (key == "lambda3") {
      cfg.kd.lambda3 = to_double(key, v);
    } else if (key == "tau_reg") {
      cfg.tau_reg = to_double(key, v);
    } else if (key == "tau_obj") {
      cfg.tau_obj = to_double(key, v);
    } else if (key == "deterministic") {
      cfg.deterministic = to_bool(key, v);
    } else if (key == "threads") {
      cfg.threads = to_int(key, v);
    } else if (key == "hflip") {
      cfg.hflip = to_bool(key, v);
    } else if (key == "kd_teacher_grad") {
      cfg.kd_teacher_grad = to_bool(key, v);
    } else if (key == "arch.fe_channels") {
      cfg.arch.fe_channels = to_int(key, v);
      cfg.arch.head_in_channels = cfg.arch.fe_channels;
    } else if (key == "arch.head_in_channels") {
      cfg.arch.head_in_channels = to_int(key, v);
    } else if (key == "arch.mask_size") {
      cfg.arch.mask_size = to_int(key, v);
      cfg.arch.mask_roi_size = cfg.arch.mask_size / 2;
    } else if (key == "arch.roi_batch") {
      cfg.arch.roi_batch = to_int(key, v);
    } else if (key == "arch.rpn_batch") {
      cfg.arch.rpn_batch = to_int(key, v);
    } else if (key == "arch.box_fc_dim") {
      cfg.arch.box_fc_dim = to_int(key, v);
    } else {
      fail("config: unknown key \"", key, "\"");
    }
  }
  cfg.validate();
}

void write_config_file(const std::string& path, const TrainConfig& cfg) {
  std::ofstream f(path);
  YKD_CHECK(f.good(), "write_config_file: cannot open ", path);
  f << "mode=" << train_mode_name(cfg.mode) << "\n";
  f << "epochs=" << cfg.epochs << "\n";
  f << "batch_size=" << cfg.batch_size << "\n";
  f << "lr=" << cfg.lr << "\n";
  f << "momentum=" << cfg.momentum << "\n";
  f << "lr_decay_epochs=" << cfg.lr_decay_epochs << "\n";
  f << "lr_decay_factor=" << cfg.lr_decay_factor << "\n";
  f << "seed=" << cfg.seed << "\n";
  f << "lambda1=" << cfg.kd.lambda1 << "\n";
  f << "lambda2=" << cfg.kd.lambda2 << "\n";
  f << "lambda3=" << cfg.kd.lambda3 << "\n";
  f << "tau_reg=" << cfg.tau_reg << "\n";
  f << "tau_obj=" << cfg.tau_obj << "\n";
  f << "deterministic=" << (cfg.deterministic ? "true" : "false") << "\n";
  f << "threads=" << cfg.threads << "\n";
  f << "hflip=" << (cfg.hflip ? "true" : "false") << "\n";
  f << "kd_teacher_grad=" << (cfg.kd_teacher_grad ? "true" : "false") << "\n";
  YKD_CHECK(f.good(), "write_config_file: write failed for ", path);
}

}  // namespace ykd
