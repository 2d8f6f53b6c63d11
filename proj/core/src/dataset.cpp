#include "icegraph/dataset.hpp"

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <sstream>
#include <thread>

#include "icegraph/errors.hpp"
#include "icegraph/kv.hpp"

namespace icegraph {

namespace fs = std::filesystem;

// Config ---------------------------------------------------------------------

int CorpusConfig::months() const {
  return static_cast<int>(std::lround(duration_years * 12.0));
}

void CorpusConfig::validate() const {
  physics.validate();
  if (mesh_sizes.empty()) throw validation_error("CorpusConfig: no mesh sizes");
  if (melt_rates.empty()) throw validation_error("CorpusConfig: no melt rates");
  for (double m0 : mesh_sizes)
    if (!std::isfinite(m0) || m0 <= 0.0)
      throw validation_error("CorpusConfig: mesh sizes must be finite and positive");
  for (double r : melt_rates)
    if (!std::isfinite(r))
      throw validation_error("CorpusConfig: melt rates must be finite");
  if (!std::isfinite(duration_years) || !std::isfinite(dt_years) ||
      !std::isfinite(smb))
    throw validation_error("CorpusConfig: duration, dt and smb must be finite");
  for (size_t i = 0; i < mesh_sizes.size(); ++i)
    for (size_t j = i + 1; j < mesh_sizes.size(); ++j)
      if (fmt_double(mesh_sizes[i]) == fmt_double(mesh_sizes[j]))
        throw validation_error("CorpusConfig: duplicate mesh size " +
                               fmt_double(mesh_sizes[i]));
  for (size_t i = 0; i < melt_rates.size(); ++i)
    for (size_t j = i + 1; j < melt_rates.size(); ++j)
      if (fmt_double(melt_rates[i]) == fmt_double(melt_rates[j]))
        throw validation_error("CorpusConfig: duplicate melt rate " +
                               fmt_double(melt_rates[i]));
  ScenarioConfig probe;
  probe.duration_years = duration_years;
  probe.dt_years = dt_years;
  const int steps = probe.num_steps();  // validates duration/dt
  const int m = months();
  if (m < 1 || std::abs(m / 12.0 - duration_years) > 1e-9 * duration_years)
    throw validation_error("CorpusConfig: duration must be a whole number of months");
  if (steps % m != 0)
    throw validation_error("CorpusConfig: dt must divide one month exactly");
}

// Workers --------------------------------------------------------------------

int max_workers() {
  if (const char* env = std::getenv("ICEGRAPH_THREADS")) {
    const std::int64_t n = parse_int(env);
    if (n < 1) throw validation_error("ICEGRAPH_THREADS must be >= 1");
    return static_cast<int>(n);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

namespace {

// Runs tasks [0, count) over a small worker pool; exceptions are collected
// per task and the first one (in task order) is rethrown after the join.
void run_parallel(int count, const std::function<void(int)>& task) {
  const int workers = std::min(max_workers(), count);
  std::vector<std::exception_ptr> errors(static_cast<size_t>(count));
  std::atomic<int> next{0};
  auto body = [&]() {
    for (;;) {
      const int t = next.fetch_add(1);
      if (t >= count) return;
      try {
        task(t);
      } catch (...) {
        errors[static_cast<size_t>(t)] = std::current_exception();
      }
    }
  };
  if (workers <= 1) {
    body();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) pool.emplace_back(body);
    for (std::thread& th : pool) th.join();
  }
  for (const std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);
}

// Hashing & file helpers -----------------------------------------------------

std::uint64_t fnv1a(const void* data, size_t len, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

constexpr std::uint64_t kFnvOffset = 14695981039346656037ULL;

std::uint64_t hash_bytes(const std::string& bytes) {
  return fnv1a(bytes.data(), bytes.size(), kFnvOffset);
}

std::string read_file_bytes(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw io_error("cannot open " + path);
  std::string bytes;
  char buf[1 << 16];
  size_t got;
  while ((got = std::fread(buf, 1, sizeof buf, f)) > 0) bytes.append(buf, got);
  if (std::ferror(f)) {
    std::fclose(f);
    throw io_error("read failed for " + path);
  }
  std::fclose(f);
  return bytes;
}

void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw io_error("cannot open " + path + " for writing");
  if (std::fwrite(bytes.data(), 1, bytes.size(), f) != bytes.size()) {
    std::fclose(f);
    throw io_error("short write to " + path);
  }
  if (std::fclose(f) != 0) throw io_error("write failed for " + path);
}

std::string check_and_read(const std::string& root, const std::string& rel,
                           std::uint64_t expected) {
  const std::string path = (fs::path(root) / rel).string();
  std::string bytes = read_file_bytes(path);
  const std::uint64_t actual = hash_bytes(bytes);
  if (actual != expected) {
    char want[24], got[24];
    std::snprintf(want, sizeof want, "%016llx", static_cast<unsigned long long>(expected));
    std::snprintf(got, sizeof got, "%016llx", static_cast<unsigned long long>(actual));
    throw io_error("corpus fingerprint mismatch for " + rel + ": manifest has " +
                   want + ", file hashes to " + got);
  }
  return bytes;
}

// trajectory.bin -------------------------------------------------------------

constexpr char kTrajMagic[8] = {'I', 'C', 'G', 'T', 'R', 'J', '1', '\n'};

template <typename T>
void append_raw(std::string& out, const T& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T take_raw(const std::string& bytes, size_t& at, const std::string& rel) {
  if (at + sizeof(T) > bytes.size())
    throw io_error("truncated trajectory file " + rel);
  T v;
  std::memcpy(&v, bytes.data() + at, sizeof v);
  at += sizeof v;
  return v;
}

// Targets of one run: months × (N×3) tensors, rows (u, v, H) per node.
std::string serialize_trajectory(const CorpusRun& run, double duration_years,
                                 double dt_years,
                                 const std::vector<DiffTensor>& monthly) {
  std::string out;
  out.append(kTrajMagic, sizeof kTrajMagic);
  append_raw(out, static_cast<std::uint32_t>(monthly.front().rows()));
  append_raw(out, static_cast<std::uint32_t>(monthly.size()));
  append_raw(out, run.m0);
  append_raw(out, run.melt_rate);
  append_raw(out, duration_years);
  append_raw(out, dt_years);
  for (const DiffTensor& t : monthly) {
    const auto v = t.values();
    out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
  }
  return out;
}

std::vector<DiffTensor> parse_trajectory(const std::string& bytes,
                                         const CorpusRun& run, int num_nodes,
                                         const std::string& rel) {
  size_t at = 0;
  if (bytes.size() < sizeof kTrajMagic ||
      std::memcmp(bytes.data(), kTrajMagic, sizeof kTrajMagic) != 0)
    throw io_error("bad magic in trajectory file " + rel);
  at = sizeof kTrajMagic;
  const auto nodes = take_raw<std::uint32_t>(bytes, at, rel);
  const auto months = take_raw<std::uint32_t>(bytes, at, rel);
  const double m0 = take_raw<double>(bytes, at, rel);
  const double rate = take_raw<double>(bytes, at, rel);
  take_raw<double>(bytes, at, rel);  // duration (header redundancy)
  take_raw<double>(bytes, at, rel);  // dt
  if (static_cast<int>(nodes) != num_nodes ||
      static_cast<int>(months) != run.sample_count || m0 != run.m0 ||
      rate != run.melt_rate)
    throw io_error("trajectory header of " + rel + " disagrees with the manifest");
  std::vector<DiffTensor> monthly;
  monthly.reserve(months);
  for (std::uint32_t k = 0; k < months; ++k) {
    DiffTensor t = DiffTensor::zeros(num_nodes, 3);
    auto v = t.values();
    for (size_t i = 0; i < v.size(); ++i) v[i] = take_raw<double>(bytes, at, rel);
    monthly.push_back(std::move(t));
  }
  if (at != bytes.size())
    throw io_error("trailing bytes in trajectory file " + rel);
  return monthly;
}

// Sample assembly ------------------------------------------------------------

DiffTensor make_inputs(const TriMesh& mesh, int month, double rate) {
  DiffTensor in = DiffTensor::zeros(mesh.num_nodes(), 4);
  for (int i = 0; i < mesh.num_nodes(); ++i) {
    in.at(i, 0) = mesh.nodes[i].x;
    in.at(i, 1) = mesh.nodes[i].y;
    in.at(i, 2) = static_cast<double>(month);
    in.at(i, 3) = rate;
  }
  return in;
}

GraphSample make_sample(const TriMesh& mesh, int context_id, const CorpusRun& run,
                        int month, DiffTensor targets) {
  GraphSample s;
  s.context_id = context_id;
  s.m0 = run.m0;
  s.melt_rate = run.melt_rate;
  s.month = month;
  s.inputs = make_inputs(mesh, month, run.melt_rate);
  s.targets = std::move(targets);
  return s;
}

std::string join_doubles(const std::vector<double>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ' ';
    out += fmt_double(v[i]);
  }
  return out;
}

std::vector<std::string> split_fields(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string f;
  while (in >> f) out.push_back(f);
  return out;
}

std::vector<double> parse_doubles(const std::string& s, size_t expect,
                                  const std::string& what) {
  const auto fields = split_fields(s);
  if (fields.size() != expect)
    throw validation_error("manifest: " + what + " expects " +
                           std::to_string(expect) + " values");
  std::vector<double> out;
  out.reserve(expect);
  for (const std::string& f : fields) out.push_back(parse_double(f));
  return out;
}

std::uint64_t parse_hash(const std::string& s) {
  if (s.empty() || s.find_first_not_of("0123456789abcdef") != std::string::npos)
    throw validation_error("manifest: bad hash field '" + s + "'");
  return std::strtoull(s.c_str(), nullptr, 16);
}

std::string hash_hex(std::uint64_t h) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// The global fingerprint chains every stored file's hash (manifest order)
// with the normalization snapshot, so it changes iff any content changes.
std::uint64_t corpus_fingerprint(const CorpusManifest& m) {
  std::uint64_t h = kFnvOffset;
  for (const CorpusMesh& mesh : m.meshes) h = fnv1a(&mesh.hash, sizeof mesh.hash, h);
  for (const CorpusRun& run : m.runs) h = fnv1a(&run.hash, sizeof run.hash, h);
  const std::string norm = join_doubles(m.norm.input_min) + "|" +
                           join_doubles(m.norm.input_max) + "|" +
                           join_doubles(m.norm.target_min) + "|" +
                           join_doubles(m.norm.target_max);
  return fnv1a(norm.data(), norm.size(), h);
}

}  // namespace

// Manifest -------------------------------------------------------------------

int CorpusManifest::total_samples() const {
  int n = 0;
  for (const CorpusRun& r : runs) n += r.sample_count;
  return n;
}

int CorpusManifest::mesh_index(double m0) const {
  for (size_t i = 0; i < meshes.size(); ++i)
    if (meshes[i].m0 == m0) return static_cast<int>(i);
  throw validation_error("corpus manifest has no mesh with m0 = " + fmt_double(m0));
}

static void write_manifest(const CorpusManifest& m) {
  KvPairs kv;
  kv.emplace_back("format", "corpus-manifest-1");
  kv.emplace_back("duration_years", fmt_double(m.duration_years));
  kv.emplace_back("dt_years", fmt_double(m.dt_years));
  kv.emplace_back("months", std::to_string(m.months));
  kv.emplace_back("norm_input_min", join_doubles(m.norm.input_min));
  kv.emplace_back("norm_input_max", join_doubles(m.norm.input_max));
  kv.emplace_back("norm_target_min", join_doubles(m.norm.target_min));
  kv.emplace_back("norm_target_max", join_doubles(m.norm.target_max));
  for (const CorpusMesh& mesh : m.meshes)
    kv.emplace_back("mesh", fmt_double(mesh.m0) + " " + mesh.file + " " +
                                hash_hex(mesh.hash));
  for (const CorpusRun& run : m.runs)
    kv.emplace_back("run", fmt_double(run.m0) + " " + fmt_double(run.melt_rate) +
                               " " + run.trajectory_file + " " +
                               std::to_string(run.sample_count) + " " +
                               hash_hex(run.hash));
  kv.emplace_back("fingerprint", hash_hex(m.fingerprint));
  write_kv_file((fs::path(m.root) / "manifest.txt").string(), kv);
}

CorpusManifest read_manifest(const std::string& dir) {
  const std::string path = (fs::path(dir) / "manifest.txt").string();
  const KvPairs kv = read_kv_file(path);
  if (kv_require(kv, "format") != "corpus-manifest-1")
    throw validation_error(path + ": unsupported manifest format");
  CorpusManifest m;
  m.root = dir;
  m.duration_years = parse_double(kv_require(kv, "duration_years"));
  m.dt_years = parse_double(kv_require(kv, "dt_years"));
  m.months = static_cast<int>(parse_int(kv_require(kv, "months")));
  m.norm.input_min = parse_doubles(kv_require(kv, "norm_input_min"), 4, "norm_input_min");
  m.norm.input_max = parse_doubles(kv_require(kv, "norm_input_max"), 4, "norm_input_max");
  m.norm.target_min = parse_doubles(kv_require(kv, "norm_target_min"), 3, "norm_target_min");
  m.norm.target_max = parse_doubles(kv_require(kv, "norm_target_max"), 3, "norm_target_max");
  m.fingerprint = parse_hash(kv_require(kv, "fingerprint"));
  for (const auto& [key, value] : kv) {
    if (key == "mesh") {
      const auto f = split_fields(value);
      if (f.size() != 3) throw validation_error(path + ": mesh row expects 3 fields");
      m.meshes.push_back({parse_double(f[0]), f[1], parse_hash(f[2])});
    } else if (key == "run") {
      const auto f = split_fields(value);
      if (f.size() != 5) throw validation_error(path + ": run row expects 5 fields");
      CorpusRun run;
      run.m0 = parse_double(f[0]);
      run.melt_rate = parse_double(f[1]);
      run.trajectory_file = f[2];
      run.sample_count = static_cast<int>(parse_int(f[3]));
      run.hash = parse_hash(f[4]);
      if (run.sample_count < 1)
        throw validation_error(path + ": run row with non-positive sample count");
      m.runs.push_back(std::move(run));
    }
  }
  if (m.meshes.empty() || m.runs.empty())
    throw validation_error(path + ": manifest lists no meshes or no runs");
  for (CorpusRun& run : m.runs)
    run.mesh_file = m.meshes[static_cast<size_t>(m.mesh_index(run.m0))].file;
  m.norm.validate();
  return m;
}

// Building -------------------------------------------------------------------

Corpus build_corpus(const std::string& out_dir, const CorpusConfig& cfg) {
  cfg.validate();
  const int months = cfg.months();
  const int steps = [&] {
    ScenarioConfig probe;
    probe.duration_years = cfg.duration_years;
    probe.dt_years = cfg.dt_years;
    return probe.num_steps();
  }();
  const int stride = steps / months;

  Corpus corpus;
  CorpusManifest& man = corpus.manifest;
  man.root = out_dir;
  man.duration_years = cfg.duration_years;
  man.dt_years = cfg.dt_years;
  man.months = months;

  // Meshes and initial states, one per m0 (shared across rates).
  std::vector<GlacierState> initials;
  for (double m0 : cfg.mesh_sizes) {
    TriMesh mesh = generate_initial_mesh(cfg.domain, m0, cfg.mesh_seed);
    initials.push_back(synthesize_initial_glacier(mesh, cfg.profile, cfg.physics));
    CorpusMesh cm;
    cm.m0 = m0;
    cm.file = fmt_double(m0) + "/mesh.txt";
    man.meshes.push_back(std::move(cm));
    corpus.contexts.push_back(make_graph_context(std::move(mesh)));
  }

  for (double m0 : cfg.mesh_sizes)
    for (double rate : cfg.melt_rates) {
      CorpusRun run;
      run.m0 = m0;
      run.melt_rate = rate;
      run.mesh_file = fmt_double(m0) + "/mesh.txt";
      run.trajectory_file = fmt_double(m0) + "/r" + fmt_double(rate) + "/trajectory.bin";
      run.sample_count = months;
      man.runs.push_back(std::move(run));
    }

  // Simulation phase: all runs must succeed before anything is written.
  std::vector<std::vector<DiffTensor>> monthly(man.runs.size());
  run_parallel(static_cast<int>(man.runs.size()), [&](int t) {
    const CorpusRun& run = man.runs[static_cast<size_t>(t)];
    const int mesh_id = man.mesh_index(run.m0);
    const TriMesh& mesh = corpus.contexts[static_cast<size_t>(mesh_id)].mesh;

    ScenarioConfig scenario;
    scenario.melt_rate = run.melt_rate;
    scenario.smb = cfg.smb;
    scenario.duration_years = cfg.duration_years;
    scenario.dt_years = cfg.dt_years;
    scenario.m0 = run.m0;
    const std::vector<GlacierState> states =
        run_transient(scenario, initials[static_cast<size_t>(mesh_id)], mesh,
                      cfg.physics);

    std::vector<DiffTensor>& out = monthly[static_cast<size_t>(t)];
    out.reserve(static_cast<size_t>(months));
    for (int k = 0; k < months; ++k) {
      const GlacierState& st = states[static_cast<size_t>((k + 1) * stride - 1)];
      DiffTensor targets = DiffTensor::zeros(mesh.num_nodes(), 3);
      for (int i = 0; i < mesh.num_nodes(); ++i) {
        targets.at(i, 0) = st.u[static_cast<size_t>(i)];
        targets.at(i, 1) = st.v[static_cast<size_t>(i)];
        targets.at(i, 2) = st.H[static_cast<size_t>(i)];
      }
      out.push_back(std::move(targets));
    }
  });

  // Write phase (single writer).
  for (size_t mi = 0; mi < man.meshes.size(); ++mi) {
    CorpusMesh& cm = man.meshes[mi];
    const fs::path mesh_path = fs::path(out_dir) / cm.file;
    std::error_code ec;
    fs::create_directories(mesh_path.parent_path(), ec);
    if (ec) throw io_error("cannot create " + mesh_path.parent_path().string());
    save_mesh(corpus.contexts[mi].mesh, mesh_path.string());
    cm.hash = hash_bytes(read_file_bytes(mesh_path.string()));
  }
  for (size_t ri = 0; ri < man.runs.size(); ++ri) {
    CorpusRun& run = man.runs[ri];
    const std::string bytes =
        serialize_trajectory(run, cfg.duration_years, cfg.dt_years, monthly[ri]);
    run.hash = hash_bytes(bytes);
    const fs::path traj_path = fs::path(out_dir) / run.trajectory_file;
    std::error_code ec;
    fs::create_directories(traj_path.parent_path(), ec);
    if (ec) throw io_error("cannot create " + traj_path.parent_path().string());
    write_file_bytes(traj_path.string(), bytes);
  }

  // Samples in manifest order, then the normalization snapshot over them.
  for (size_t ri = 0; ri < man.runs.size(); ++ri) {
    const CorpusRun& run = man.runs[ri];
    const int mesh_id = man.mesh_index(run.m0);
    const TriMesh& mesh = corpus.contexts[static_cast<size_t>(mesh_id)].mesh;
    for (int k = 0; k < months; ++k)
      corpus.samples.push_back(
          make_sample(mesh, mesh_id, run, k, std::move(monthly[ri][static_cast<size_t>(k)])));
  }
  man.norm = compute_normalization(corpus.contexts, corpus.samples, months);
  man.fingerprint = corpus_fingerprint(man);
  write_manifest(man);
  return corpus;
}

// Loading --------------------------------------------------------------------

Corpus load_corpus(const std::string& dir) {
  Corpus corpus;
  corpus.manifest = read_manifest(dir);
  const CorpusManifest& man = corpus.manifest;
  if (man.fingerprint != corpus_fingerprint(man))
    throw io_error(dir + "/manifest.txt: global fingerprint does not match its rows");

  for (const CorpusMesh& cm : man.meshes) {
    check_and_read(man.root, cm.file, cm.hash);
    corpus.contexts.push_back(
        make_graph_context(load_mesh((fs::path(man.root) / cm.file).string())));
  }
  for (const CorpusRun& run : man.runs) {
    const int mesh_id = man.mesh_index(run.m0);
    const TriMesh& mesh = corpus.contexts[static_cast<size_t>(mesh_id)].mesh;
    const std::string bytes = check_and_read(man.root, run.trajectory_file, run.hash);
    std::vector<DiffTensor> monthly =
        parse_trajectory(bytes, run, mesh.num_nodes(), run.trajectory_file);
    for (int k = 0; k < run.sample_count; ++k)
      corpus.samples.push_back(
          make_sample(mesh, mesh_id, run, k, std::move(monthly[static_cast<size_t>(k)])));
  }
  return corpus;
}

GraphSample load_sample(const CorpusManifest& manifest, int index) {
  if (index < 0 || index >= manifest.total_samples())
    throw validation_error("load_sample: index " + std::to_string(index) +
                           " out of range (corpus has " +
                           std::to_string(manifest.total_samples()) + " samples)");
  int at = index;
  for (const CorpusRun& run : manifest.runs) {
    if (at >= run.sample_count) {
      at -= run.sample_count;
      continue;
    }
    const int mesh_id = manifest.mesh_index(run.m0);
    const CorpusMesh& cm = manifest.meshes[static_cast<size_t>(mesh_id)];
    check_and_read(manifest.root, cm.file, cm.hash);
    const TriMesh mesh = load_mesh((fs::path(manifest.root) / cm.file).string());
    const std::string bytes =
        check_and_read(manifest.root, run.trajectory_file, run.hash);
    std::vector<DiffTensor> monthly =
        parse_trajectory(bytes, run, mesh.num_nodes(), run.trajectory_file);
    return make_sample(mesh, mesh_id, run, at, std::move(monthly[static_cast<size_t>(at)]));
  }
  throw validation_error("load_sample: manifest run table is inconsistent");
}

}  // namespace icegraph
