#include "dosediff/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace dosediff::io {

namespace {

using ordered_json = nlohmann::ordered_json;

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "size",          "cases",        "n_beams",       "split",
      "T",             "beta_start",   "beta_end",      "dose_scale",
      "widths",        "temb_dim",     "groups",        "batch_size",
      "epochs",        "lr",           "lr_drop_epoch", "lr_after_drop",
      "pretrain_epochs", "pretrain_lr", "early_stop_patience", "ckpt_interval",
      "dvh_bins",      "seed",         "data_dir",
  };
  return keys;
}

}  // namespace

RunConfig RunConfig::from_json_text(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("config: invalid JSON: ") + e.what());
  }
  DD_CHECK(j.is_object(), "config: top-level JSON value must be an object");
  for (const auto& [key, value] : j.items()) {
    DD_CHECK(known_keys().count(key) == 1, "config: unknown key '" + key + "'");
  }

  RunConfig c;
  try {
    if (j.contains("size")) c.size = j["size"].get<int>();
    if (j.contains("cases")) c.cases = j["cases"].get<int>();
    if (j.contains("n_beams")) c.n_beams = j["n_beams"].get<int>();
    if (j.contains("split")) {
      auto v = j["split"].get<std::vector<double>>();
      DD_CHECK(v.size() == 3, "config: split must have 3 fractions");
      c.split = {v[0], v[1], v[2]};
    }
    if (j.contains("T")) c.T = j["T"].get<int>();
    if (j.contains("beta_start")) c.beta_start = j["beta_start"].get<double>();
    if (j.contains("beta_end")) c.beta_end = j["beta_end"].get<double>();
    if (j.contains("dose_scale")) c.dose_scale = j["dose_scale"].get<double>();
    if (j.contains("widths")) {
      auto v = j["widths"].get<std::vector<int>>();
      DD_CHECK(v.size() == 6, "config: widths must have 6 entries");
      for (int i = 0; i < 6; ++i) c.widths[static_cast<std::size_t>(i)] = v[static_cast<std::size_t>(i)];
    }
    if (j.contains("temb_dim")) c.temb_dim = j["temb_dim"].get<int>();
    if (j.contains("groups")) c.groups = j["groups"].get<int>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<int>();
    if (j.contains("epochs")) c.epochs = j["epochs"].get<int>();
    if (j.contains("lr")) c.lr = j["lr"].get<double>();
    if (j.contains("lr_drop_epoch")) c.lr_drop_epoch = j["lr_drop_epoch"].get<int>();
    if (j.contains("lr_after_drop")) c.lr_after_drop = j["lr_after_drop"].get<double>();
    if (j.contains("pretrain_epochs")) c.pretrain_epochs = j["pretrain_epochs"].get<int>();
    if (j.contains("pretrain_lr")) c.pretrain_lr = j["pretrain_lr"].get<double>();
    if (j.contains("early_stop_patience")) {
      c.early_stop_patience = j["early_stop_patience"].get<int>();
    }
    if (j.contains("ckpt_interval")) c.ckpt_interval = j["ckpt_interval"].get<int>();
    if (j.contains("dvh_bins")) c.dvh_bins = j["dvh_bins"].get<int>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("data_dir")) c.data_dir = j["data_dir"].get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("config: bad value type: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) {
    throw IoError(IoError::Kind::OpenFailed, "config: cannot open " + path);
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_json_text(buf.str());
}

std::string RunConfig::to_json_text() const {
  ordered_json j;
  j["size"] = size;
  j["cases"] = cases;
  j["n_beams"] = n_beams;
  j["split"] = split;
  j["T"] = T;
  j["beta_start"] = beta_start;
  j["beta_end"] = beta_end;
  j["dose_scale"] = dose_scale;
  j["widths"] = widths;
  j["temb_dim"] = temb_dim;
  j["groups"] = groups;
  j["batch_size"] = batch_size;
  j["epochs"] = epochs;
  j["lr"] = lr;
  j["lr_drop_epoch"] = lr_drop_epoch;
  j["lr_after_drop"] = lr_after_drop;
  j["pretrain_epochs"] = pretrain_epochs;
  j["pretrain_lr"] = pretrain_lr;
  j["early_stop_patience"] = early_stop_patience;
  j["ckpt_interval"] = ckpt_interval;
  j["dvh_bins"] = dvh_bins;
  j["seed"] = seed;
  j["data_dir"] = data_dir;
  return j.dump(2) + "\n";
}

nets::NetConfig RunConfig::net_config() const {
  nets::NetConfig n;
  n.widths = widths;
  n.groups = groups;
  n.temb_dim = temb_dim;
  return n;
}

void RunConfig::validate() const {
  DD_CHECK(size >= 16 && size % 16 == 0, "config: size must be a positive multiple of 16");
  DD_CHECK(cases >= 1, "config: cases must be >= 1");
  DD_CHECK(n_beams >= 1, "config: n_beams must be >= 1");
  DD_CHECK(T >= 1, "config: T must be >= 1");
  DD_CHECK(beta_start > 0.0 && beta_start < 1.0, "config: beta_start must be in (0,1)");
  DD_CHECK(beta_end > 0.0 && beta_end < 1.0, "config: beta_end must be in (0,1)");
  DD_CHECK(dose_scale > 0.0, "config: dose_scale must be positive");
  DD_CHECK(batch_size >= 1, "config: batch_size must be >= 1");
  DD_CHECK(epochs >= 0, "config: epochs must be >= 0");
  DD_CHECK(lr > 0.0 && lr_after_drop > 0.0, "config: learning rates must be positive");
  DD_CHECK(pretrain_epochs >= 0, "config: pretrain_epochs must be >= 0");
  DD_CHECK(pretrain_lr > 0.0, "config: pretrain_lr must be positive");
  DD_CHECK(early_stop_patience >= 0, "config: early_stop_patience must be >= 0");
  DD_CHECK(ckpt_interval >= 0, "config: ckpt_interval must be >= 0");
  DD_CHECK(dvh_bins >= 2, "config: dvh_bins must be >= 2");
  net_config().validate();
}

std::string RunConfig::digest_input(std::string_view kind) const {
  std::ostringstream os;
  os << "kind=" << kind << ";in_channels=" << net_config().in_channels << ";widths=";
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (i) os << ",";
    os << widths[i];
  }
  os << ";temb_dim=" << temb_dim << ";groups=" << groups << ";T=" << T
     << ";beta_start=" << beta_start << ";beta_end=" << beta_end
     << ";dose_scale=" << dose_scale;
  return os.str();
}

}  // namespace dosediff::io
