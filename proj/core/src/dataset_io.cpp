#include "respalloc/dataset_io.hpp"

#include <fstream>
#include <sstream>

#include "respalloc/errors.hpp"

namespace resp {

namespace {

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (long r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (long c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, long line) {
  if (!j.is_array()) throw ParseError("expected matrix as array of rows", line);
  const long rows = static_cast<long>(j.size());
  if (rows == 0) return Eigen::MatrixXd(0, 0);
  const long cols = static_cast<long>(j[0].size());
  Eigen::MatrixXd m(rows, cols);
  for (long r = 0; r < rows; ++r) {
    if (!j[r].is_array() || static_cast<long>(j[r].size()) != cols)
      throw ParseError("ragged matrix rows", line);
    for (long c = 0; c < cols; ++c) {
      if (!j[r][c].is_number()) throw ParseError("non-numeric matrix entry", line);
      m(r, c) = j[r][c].get<double>();
    }
  }
  return m;
}

nlohmann::json datum_to_json(const SceneDatum& d) {
  const SceneSequence& s = d.seq;
  nlohmann::json tokens = nlohmann::json::array();
  for (const AgentToken& t : s.tokens) {
    tokens.push_back({t.agent_type, t.position.x(), t.position.y(), t.velocity.x(),
                      t.velocity.y(), t.heading});
  }
  nlohmann::json cur = nlohmann::json::array();
  for (const AgentPhysState& st : s.current_states) {
    cur.push_back({st.position.x(), st.position.y(), st.velocity.x(), st.velocity.y()});
  }
  nlohmann::json j{{"n_agents", s.n_agents}, {"n_max", s.n_max},       {"t_max", s.t_max},
                   {"tokens", tokens},       {"valid", s.valid},       {"agent_ids", s.agent_ids},
                   {"current", cur},         {"u", matrix_to_json(d.u)},
                   {"u_des", matrix_to_json(d.u_des)}};
  if (d.future.size() > 0) {
    j["future"] = matrix_to_json(d.future);
    j["future_valid"] = matrix_to_json(d.future_valid);
  }
  return j;
}

SceneDatum datum_from_json(const nlohmann::json& j, long line) {
  SceneDatum d;
  SceneSequence& s = d.seq;
  try {
    s.n_agents = j.at("n_agents").get<long>();
    s.n_max = j.at("n_max").get<long>();
    s.t_max = j.at("t_max").get<long>();
    const auto& tokens = j.at("tokens");
    const auto& valid = j.at("valid");
    if (static_cast<long>(tokens.size()) != s.n_max * s.t_max ||
        static_cast<long>(valid.size()) != s.n_max * s.t_max)
      throw ParseError("token/valid array size mismatch", line);
    s.tokens.resize(tokens.size());
    s.valid.resize(valid.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const auto& t = tokens[i];
      if (!t.is_array() || t.size() != 6) throw ParseError("malformed token", line);
      s.tokens[i].agent_type = t[0].get<int>();
      s.tokens[i].position = Eigen::Vector2d(t[1].get<double>(), t[2].get<double>());
      s.tokens[i].velocity = Eigen::Vector2d(t[3].get<double>(), t[4].get<double>());
      s.tokens[i].heading = t[5].get<double>();
      s.valid[i] = valid[i].get<int>() ? 1 : 0;
    }
    s.agent_ids = j.at("agent_ids").get<std::vector<long>>();
    const auto& cur = j.at("current");
    if (static_cast<long>(cur.size()) != s.n_max) throw ParseError("current size mismatch", line);
    s.current_states.resize(cur.size());
    for (std::size_t i = 0; i < cur.size(); ++i) {
      const auto& c = cur[i];
      if (!c.is_array() || c.size() != 4) throw ParseError("malformed current state", line);
      s.current_states[i].position = Eigen::Vector2d(c[0].get<double>(), c[1].get<double>());
      s.current_states[i].velocity = Eigen::Vector2d(c[2].get<double>(), c[3].get<double>());
    }
    d.u = matrix_from_json(j.at("u"), line);
    d.u_des = matrix_from_json(j.at("u_des"), line);
    if (j.contains("future")) {
      d.future = matrix_from_json(j["future"], line);
      d.future_valid = matrix_from_json(j.at("future_valid"), line);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad datum record: ") + e.what(), line);
  }
  if (d.u.rows() != s.n_max || d.u.cols() != 2 || d.u_des.rows() != s.n_max || d.u_des.cols() != 2)
    throw ParseError("control matrix shape mismatch", line);
  if (!d.u.allFinite() || !d.u_des.allFinite()) throw ParseError("non-finite controls", line);
  return d;
}

}  // namespace

void save_dataset(const std::string& path, const Dataset& ds) {
  if (ds.data.size() != ds.episode_of.size())
    throw InvalidInputError("save_dataset: episode labels missing");
  std::ofstream out(path);
  if (!out) throw IoError("cannot open dataset for writing: " + path);
  nlohmann::json head{{"schema", "respalloc-dataset"},
                      {"version", kDatasetSchemaVersion},
                      {"count", ds.data.size()},
                      {"metadata", ds.metadata.is_null() ? nlohmann::json::object() : ds.metadata}};
  out << head.dump() << '\n';
  for (std::size_t i = 0; i < ds.data.size(); ++i) {
    nlohmann::json j = datum_to_json(ds.data[i]);
    j["episode"] = ds.episode_of[i];
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("failed writing dataset: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset: " + path);
  std::string line;
  long line_no = 0;
  Dataset ds;
  bool have_head = false;
  long expected = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), line_no);
    }
    if (!have_head) {
      if (j.value("schema", "") != "respalloc-dataset")
        throw ParseError("not a respalloc dataset", line_no);
      if (j.value("version", -1) != kDatasetSchemaVersion)
        throw ParseError("unsupported dataset version", line_no);
      ds.metadata = j.value("metadata", nlohmann::json::object());
      expected = j.value("count", -1);
      have_head = true;
      continue;
    }
    ds.data.push_back(datum_from_json(j, line_no));
    ds.episode_of.push_back(j.value("episode", static_cast<long>(ds.data.size() - 1)));
  }
  if (!have_head) throw ParseError("empty dataset file: " + path);
  if (expected >= 0 && expected != static_cast<long>(ds.data.size()))
    throw ParseError("dataset count mismatch: header says " + std::to_string(expected) +
                     ", found " + std::to_string(ds.data.size()));
  return ds;
}

void save_gamma_sidecar(const std::string& path, const GammaSidecar& sc) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open sidecar for writing: " + path);
  nlohmann::json j{{"schema", "respalloc-gamma-sidecar"},
                   {"gamma", matrix_to_json(sc.gamma)},
                   {"mode", sc.mode}};
  out << j.dump() << '\n';
  if (!out) throw IoError("failed writing sidecar: " + path);
}

GammaSidecar load_gamma_sidecar(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open sidecar: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("invalid sidecar JSON: ") + e.what());
  }
  if (j.value("schema", "") != "respalloc-gamma-sidecar")
    throw ParseError("not a gamma sidecar: " + path);
  GammaSidecar sc;
  sc.gamma = matrix_from_json(j.at("gamma"), -1);
  sc.mode = j.at("mode").get<std::vector<int>>();
  return sc;
}

void write_tracks_csv(const std::string& path, const TrackTable& table) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open track CSV for writing: " + path);
  out << "track_id,frame_id,timestamp_ms,agent_type,x,y,vx,vy,psi_rad,length,width\n";
  out.precision(17);
  for (const auto& [id, recs] : table) {
    for (const TrackRecord& r : recs) {
      out << r.track_id << ',' << r.frame_id << ',' << r.timestamp_ms << ',' << r.agent_type
          << ',' << r.x << ',' << r.y << ',' << r.vx << ',' << r.vy << ',' << r.psi_rad << ','
          << r.length << ',' << r.width << '\n';
    }
  }
  if (!out) throw IoError("failed writing track CSV: " + path);
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) fields.push_back(f);
  if (!line.empty() && line.back() == ',') fields.push_back("");
  return fields;
}

double parse_num(const std::string& s, long line) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw ParseError("trailing characters in number: " + s, line);
    return v;
  } catch (const std::invalid_argument&) {
    throw ParseError("malformed number: '" + s + "'", line);
  } catch (const std::out_of_range&) {
    throw ParseError("number out of range: '" + s + "'", line);
  }
}

}  // namespace

TrackTable load_tracks_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open track CSV: " + path);

  std::string line;
  if (!std::getline(in, line)) return {};  // empty file, empty result

  const std::vector<std::string> header = split_csv_line(line);
  auto col = [&](const std::string& name) -> long {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<long>(i);
    return -1;
  };
  const long c_id = col("track_id"), c_frame = col("frame_id"), c_ts = col("timestamp_ms"),
             c_type = col("agent_type"), c_x = col("x"), c_y = col("y");
  const long c_vx = col("vx"), c_vy = col("vy"), c_psi = col("psi_rad"), c_len = col("length"),
             c_w = col("width");
  for (const auto& [name, c] : std::initializer_list<std::pair<const char*, long>>{
           {"track_id", c_id}, {"frame_id", c_frame}, {"timestamp_ms", c_ts},
           {"agent_type", c_type}, {"x", c_x}, {"y", c_y}}) {
    if (c < 0) throw ParseError(std::string("missing required column: ") + name, 1);
  }

  TrackTable table;
  long line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::vector<std::string> f = split_csv_line(line);
    if (f.size() != header.size())
      throw ParseError("wrong field count (" + std::to_string(f.size()) + " vs header " +
                       std::to_string(header.size()) + ")", line_no);
    TrackRecord r;
    r.track_id = static_cast<long>(parse_num(f[c_id], line_no));
    r.frame_id = static_cast<long>(parse_num(f[c_frame], line_no));
    r.timestamp_ms = parse_num(f[c_ts], line_no);
    r.agent_type = static_cast<int>(parse_num(f[c_type], line_no));
    r.x = parse_num(f[c_x], line_no);
    r.y = parse_num(f[c_y], line_no);
    if (c_vx >= 0) r.vx = parse_num(f[c_vx], line_no);
    if (c_vy >= 0) r.vy = parse_num(f[c_vy], line_no);
    if (c_psi >= 0) r.psi_rad = parse_num(f[c_psi], line_no);
    if (c_len >= 0) r.length = parse_num(f[c_len], line_no);
    if (c_w >= 0) r.width = parse_num(f[c_w], line_no);
    table[r.track_id].push_back(r);
  }

  const bool have_v = c_vx >= 0 && c_vy >= 0;
  for (auto& [id, recs] : table) {
    for (std::size_t i = 1; i < recs.size(); ++i) {
      if (recs[i].frame_id <= recs[i - 1].frame_id)
        throw ParseError("non-monotone frames for track " + std::to_string(id));
    }
    if (!have_v && recs.size() >= 2) {
      for (std::size_t i = 0; i < recs.size(); ++i) {
        const std::size_t a = i == 0 ? 0 : i - 1;
        const std::size_t b = i == 0 ? 1 : i;
        const double dt_s = (recs[b].timestamp_ms - recs[a].timestamp_ms) / 1000.0;
        if (dt_s <= 0.0) throw ParseError("non-increasing timestamps for track " + std::to_string(id));
        recs[i].vx = (recs[b].x - recs[a].x) / dt_s;
        recs[i].vy = (recs[b].y - recs[a].y) / dt_s;
      }
    }
  }
  return table;
}

}  // namespace resp
