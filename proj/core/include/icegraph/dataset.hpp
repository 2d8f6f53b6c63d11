#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "icegraph/mesh.hpp"
#include "icegraph/model.hpp"
#include "icegraph/physics.hpp"

namespace icegraph {

// Sweep definition for a stored corpus: every (mesh size, melt rate) pair is
// one transient run, sliced into one sample per simulated month.
struct CorpusConfig {
  Rect domain{0.0, 0.0, 100e3, 100e3};
  std::vector<double> mesh_sizes;      // m0 per mesh, meters
  std::vector<double> melt_rates;      // r per run, m/yr
  double duration_years = 20.0;
  double dt_years = 1.0 / 12.0;        // must divide a month exactly
  double smb = 0.0;                    // surface mass balance, m/yr
  std::uint64_t mesh_seed = 7;
  GlacierProfile profile;
  PhysicsParams physics;

  int months() const;                  // duration in whole months
  void validate() const;               // throws validation_error
};

// One stored mesh (shared by all runs at the same m0) and one stored run.
// Paths are relative to the corpus root; hashes are FNV-1a over file bytes.
struct CorpusMesh {
  double m0 = 0.0;
  std::string file;
  std::uint64_t hash = 0;
};

struct CorpusRun {
  double m0 = 0.0;
  double melt_rate = 0.0;
  std::string mesh_file;
  std::string trajectory_file;
  int sample_count = 0;
  std::uint64_t hash = 0;
};

// manifest.txt contents: the run table, a normalization-bounds snapshot over
// the whole corpus, and a global fingerprint that changes iff any stored
// byte changes.
struct CorpusManifest {
  std::string root;  // directory holding manifest.txt (set on read/build)
  double duration_years = 0.0;
  double dt_years = 0.0;
  int months = 0;
  NormalizationSpec norm;
  std::vector<CorpusMesh> meshes;
  std::vector<CorpusRun> runs;
  std::uint64_t fingerprint = 0;

  int total_samples() const;
  // Mesh-table index for a run (shared GraphContext id). throws if absent.
  int mesh_index(double m0) const;
};

// A corpus materialized in memory: contexts follow the manifest mesh table,
// samples follow the run table (months within a run are consecutive).
struct Corpus {
  CorpusManifest manifest;
  std::vector<GraphContext> contexts;
  std::vector<GraphSample> samples;
};

// Runs the full (mesh size × melt rate) sweep and stores it under out_dir:
//   <out_dir>/<m0>/mesh.txt
//   <out_dir>/<m0>/r<r>/trajectory.bin
//   <out_dir>/manifest.txt
// All simulations run first (in parallel, capped by max_workers()); files are
// written only after every run has succeeded, so a failed run leaves nothing
// behind. Rebuilding with an identical config reproduces the fingerprint.
Corpus build_corpus(const std::string& out_dir, const CorpusConfig& cfg);

CorpusManifest read_manifest(const std::string& dir);  // io_error / validation_error

// Loads every stored run back into memory, verifying each file against its
// manifest hash (mismatch → io_error naming the file).
Corpus load_corpus(const std::string& dir);

// Random access to one stored sample (index over the concatenated run table).
// context_id refers to the manifest mesh table. Verifies the file hash.
GraphSample load_sample(const CorpusManifest& manifest, int index);

// Worker cap for parallel phases: ICEGRAPH_THREADS if set (≥1), else the
// hardware concurrency.
int max_workers();

}  // namespace icegraph
