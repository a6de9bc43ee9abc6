#pragma once

// Adapter bundle container: a directory holding manifest.json and weights.bin.
//
// manifest.json
//   { "format_version": 1, "adapter_id": ..., "base_model_id": ..., "rank_hint": ...,
//     "sites": [ { "name", "role": "A"|"B", "rows", "cols", "dtype": "f32"|"f64",
//                  "offset", "length" }, ... ] }
// weights.bin
//   concatenated row-major little-endian blocks at the stated byte offsets.
//
// Subspace and coefficient bundles reuse the container: they add top-level
// manifest keys and tag each entry with a "field" name so one site can carry
// several tensors.

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "elorax/linalg.hpp"

namespace elorax {

enum class Role : std::uint8_t { A, B };

std::string_view to_string(Role role);
Role parse_role(std::string_view text);

struct SiteId {
  std::string name;  // layer path, e.g. "layer.3.attn.query"
  Role role = Role::A;

  auto operator<=>(const SiteId&) const = default;
};

std::string to_string(const SiteId& site);

enum class DType : std::uint8_t { F32, F64 };

std::string_view to_string(DType dtype);
std::size_t bytes_per_scalar(DType dtype);

/// One stored matrix. Values are held in double precision; `dtype` selects
/// the on-disk width. F32 matrices loaded from disk round-trip bit-exactly.
struct SiteMatrix {
  RowMatrix values;
  DType dtype = DType::F32;

  SiteMatrix() = default;
  explicit SiteMatrix(RowMatrix v, DType t = DType::F32) : values(std::move(v)), dtype(t) {}

  Eigen::Index rows() const { return values.rows(); }
  Eigen::Index cols() const { return values.cols(); }

  bool operator==(const SiteMatrix& other) const {
    return dtype == other.dtype && values.rows() == other.values.rows() &&
           values.cols() == other.values.cols() && values == other.values;
  }
};

struct AdapterBundle {
  std::string adapter_id;
  std::string base_model_id;
  std::uint64_t rank_hint = 0;
  std::map<SiteId, SiteMatrix> sites;

  bool operator==(const AdapterBundle&) const = default;
};

/// Ambient dimension of a site: n (cols) for role A, m (rows) for role B.
Eigen::Index ambient_dim(const SiteMatrix& matrix, Role role);
/// Number of rank vectors a site contributes: rows for A, cols for B.
Eigen::Index vector_count(const SiteMatrix& matrix, Role role);

/// A matrices are read as rows (n-dim vectors); B matrices as columns
/// (m-dim vectors). Either way the result is one vector per row.
RowMatrix site_vectors(const SiteMatrix& matrix, Role role);
/// Inverse of site_vectors.
RowMatrix from_site_vectors(const RowMatrix& vectors, Role role);

struct SiteInfo {
  Eigen::Index ambient_dim = 0;
  std::vector<Eigen::Index> vector_counts;  // in input bundle order
};

struct SiteCatalog {
  std::map<SiteId, SiteInfo> sites;
  std::vector<std::string> warnings;
};

AdapterBundle load_adapter_bundle(const std::filesystem::path& dir);
void save_adapter_bundle(const AdapterBundle& bundle, const std::filesystem::path& dir);

/// Sites present in every bundle with a consistent ambient dimension. Sites
/// missing from some bundles are dropped with a warning.
SiteCatalog validate_collection(const std::vector<AdapterBundle>& bundles);

/// Stacks the site's rank vectors from each bundle, in input order:
/// (sum r_i) x ambient_dim.
SiteMatrix stack_site(const std::vector<AdapterBundle>& bundles, const SiteId& site);

// ---- generic container -------------------------------------------------

struct TensorRecord {
  SiteId site;
  std::string field;       // empty for plain adapter sites
  SiteMatrix matrix;
  nlohmann::json attrs = nlohmann::json::object();  // extra per-entry keys
};

struct Container {
  nlohmann::json header = nlohmann::json::object();  // top-level keys except "sites"
  std::vector<TensorRecord> tensors;
};

struct EncodedContainer {
  std::string manifest;  // manifest.json text
  std::string weights;   // weights.bin bytes
};

/// Deterministic encoding: tensors sorted by (name, role, field), keys sorted.
EncodedContainer encode_container(const Container& container);
Container decode_container(const std::string& manifest_text, const std::string& weights);

Container read_container(const std::filesystem::path& dir);
void write_container(const Container& container, const std::filesystem::path& dir);

/// Lowercase hex SHA-256 over the encoded manifest and weights.
std::string content_hash(const EncodedContainer& encoded);

}  // namespace elorax
