#include "elorax/adapter_store.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "elorax/error.hpp"

namespace elorax {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Role role) { return role == Role::A ? "A" : "B"; }

Role parse_role(std::string_view text) {
  if (text == "A") return Role::A;
  if (text == "B") return Role::B;
  throw Error(ErrorKind::MalformedManifest, "role must be \"A\" or \"B\", got \"" + std::string(text) + "\"");
}

std::string to_string(const SiteId& site) {
  return site.name + ":" + std::string(to_string(site.role));
}

std::string_view to_string(DType dtype) { return dtype == DType::F32 ? "f32" : "f64"; }

std::size_t bytes_per_scalar(DType dtype) { return dtype == DType::F32 ? 4 : 8; }

namespace {

DType parse_dtype(std::string_view text) {
  if (text == "f32") return DType::F32;
  if (text == "f64") return DType::F64;
  throw Error(ErrorKind::MalformedManifest, "unsupported dtype \"" + std::string(text) + "\"");
}

template <typename U>
U swap_bytes(U v) {
  U out = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out = static_cast<U>((out << 8) | (v & 0xff));
    v = static_cast<U>(v >> 8);
  }
  return out;
}

template <typename U>
void append_le(std::string& out, U bits) {
  if constexpr (std::endian::native == std::endian::big) bits = swap_bytes(bits);
  char buf[sizeof(U)];
  std::memcpy(buf, &bits, sizeof(U));
  out.append(buf, sizeof(U));
}

template <typename U>
U read_le(const char* p) {
  U bits;
  std::memcpy(&bits, p, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) bits = swap_bytes(bits);
  return bits;
}

void append_matrix(std::string& out, const SiteMatrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double v = m.values(i, j);
      if (m.dtype == DType::F32)
        append_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      else
        append_le(out, std::bit_cast<std::uint64_t>(v));
    }
  }
}

void check_finite(const SiteMatrix& m, const std::string& where) {
  if (!m.values.allFinite()) throw Error(ErrorKind::NonFinite, "non-finite value in " + where);
  if (m.dtype == DType::F32) {
    // values representable in double may still overflow float
    for (Eigen::Index i = 0; i < m.values.size(); ++i)
      if (!std::isfinite(static_cast<float>(m.values.data()[i])))
        throw Error(ErrorKind::NonFinite, "value overflows f32 in " + where);
  }
}

template <typename T>
T required(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key))
    throw Error(ErrorKind::MalformedManifest, where + ": missing field \"" + key + "\"");
  const json& v = obj.at(key);
  if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string())
      throw Error(ErrorKind::MalformedManifest, where + ": field \"" + key + "\" must be a string");
  } else {
    if (!v.is_number_unsigned())
      throw Error(ErrorKind::MalformedManifest,
                  where + ": field \"" + key + "\" must be a non-negative integer");
  }
  return v.get<T>();
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoFailure, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw Error(ErrorKind::IoFailure, "read failed on " + path.string());
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot create " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  if (!out) throw Error(ErrorKind::IoFailure, "write failed on " + path.string());
}

const std::set<std::string>& reserved_entry_keys() {
  static const std::set<std::string> keys = {"name", "role", "rows", "cols", "dtype",
                                             "offset", "length", "field"};
  return keys;
}

}  // namespace

Eigen::Index ambient_dim(const SiteMatrix& matrix, Role role) {
  return role == Role::A ? matrix.cols() : matrix.rows();
}

Eigen::Index vector_count(const SiteMatrix& matrix, Role role) {
  return role == Role::A ? matrix.rows() : matrix.cols();
}

RowMatrix site_vectors(const SiteMatrix& matrix, Role role) {
  if (role == Role::A) return matrix.values;
  return matrix.values.transpose();
}

RowMatrix from_site_vectors(const RowMatrix& vectors, Role role) {
  if (role == Role::A) return vectors;
  return vectors.transpose();
}

EncodedContainer encode_container(const Container& container) {
  std::vector<const TensorRecord*> order;
  order.reserve(container.tensors.size());
  for (const auto& t : container.tensors) order.push_back(&t);
  std::sort(order.begin(), order.end(), [](const TensorRecord* a, const TensorRecord* b) {
    return std::tie(a->site, a->field) < std::tie(b->site, b->field);
  });
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (order[i - 1]->site == order[i]->site && order[i - 1]->field == order[i]->field)
      throw Error(ErrorKind::MalformedManifest, "duplicate tensor " + to_string(order[i]->site));
  }

  EncodedContainer out;
  json manifest = container.header;
  if (!manifest.is_object()) manifest = json::object();
  manifest["format_version"] = 1;
  json sites = json::array();
  for (const TensorRecord* t : order) {
    if (t->site.name.empty()) throw Error(ErrorKind::MalformedManifest, "empty site name");
    check_finite(t->matrix, to_string(t->site));
    const std::size_t offset = out.weights.size();
    append_matrix(out.weights, t->matrix);
    json entry = t->attrs.is_object() ? t->attrs : json::object();
    entry["name"] = t->site.name;
    entry["role"] = std::string(to_string(t->site.role));
    entry["rows"] = static_cast<std::uint64_t>(t->matrix.rows());
    entry["cols"] = static_cast<std::uint64_t>(t->matrix.cols());
    entry["dtype"] = std::string(to_string(t->matrix.dtype));
    entry["offset"] = static_cast<std::uint64_t>(offset);
    entry["length"] = static_cast<std::uint64_t>(out.weights.size() - offset);
    if (!t->field.empty()) entry["field"] = t->field;
    sites.push_back(std::move(entry));
  }
  manifest["sites"] = std::move(sites);
  out.manifest = manifest.dump(2) + "\n";
  return out;
}

Container decode_container(const std::string& manifest_text, const std::string& weights) {
  json manifest;
  try {
    manifest = json::parse(manifest_text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::MalformedManifest, std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!manifest.is_object()) throw Error(ErrorKind::MalformedManifest, "manifest must be an object");
  if (required<std::uint64_t>(manifest, "format_version", "manifest") != 1)
    throw Error(ErrorKind::MalformedManifest, "unsupported format_version");
  if (!manifest.contains("sites") || !manifest.at("sites").is_array())
    throw Error(ErrorKind::MalformedManifest, "manifest: missing array field \"sites\"");

  Container c;
  c.header = manifest;
  c.header.erase("sites");

  std::set<std::pair<SiteId, std::string>> seen;
  std::size_t index = 0;
  for (const json& entry : manifest.at("sites")) {
    const std::string where = "sites[" + std::to_string(index++) + "]";
    TensorRecord t;
    t.site.name = required<std::string>(entry, "name", where);
    if (t.site.name.empty()) throw Error(ErrorKind::MalformedManifest, where + ": empty name");
    t.site.role = parse_role(required<std::string>(entry, "role", where));
    const auto rows = required<std::uint64_t>(entry, "rows", where);
    const auto cols = required<std::uint64_t>(entry, "cols", where);
    const DType dtype = parse_dtype(required<std::string>(entry, "dtype", where));
    const auto offset = required<std::uint64_t>(entry, "offset", where);
    const auto length = required<std::uint64_t>(entry, "length", where);
    if (entry.contains("field")) {
      if (!entry.at("field").is_string())
        throw Error(ErrorKind::MalformedManifest, where + ": field must be a string");
      t.field = entry.at("field").get<std::string>();
    }
    if (rows < 1 || cols < 1)
      throw Error(ErrorKind::ShapeMismatch, where + ": rows and cols must be >= 1");
    const std::uint64_t limit = std::uint64_t{1} << 40;
    if (rows > limit || cols > limit || rows * cols > limit)
      throw Error(ErrorKind::ShapeMismatch, where + ": shape too large");
    const std::uint64_t expected = rows * cols * bytes_per_scalar(dtype);
    if (length != expected)
      throw Error(ErrorKind::ShapeMismatch, where + ": length " + std::to_string(length) +
                                                " but " + std::to_string(rows) + "x" +
                                                std::to_string(cols) + " " +
                                                std::string(to_string(dtype)) + " needs " +
                                                std::to_string(expected));
    if (offset > weights.size() || length > weights.size() - offset)
      throw Error(ErrorKind::MalformedManifest, where + ": block exceeds weights.bin size");
    if (!seen.emplace(t.site, t.field).second)
      throw Error(ErrorKind::MalformedManifest, where + ": duplicate site " + to_string(t.site));

    t.matrix.dtype = dtype;
    t.matrix.values.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    const char* p = weights.data() + offset;
    const std::size_t width = bytes_per_scalar(dtype);
    for (Eigen::Index i = 0; i < t.matrix.values.rows(); ++i) {
      for (Eigen::Index j = 0; j < t.matrix.values.cols(); ++j, p += width) {
        const double v = dtype == DType::F32
                             ? static_cast<double>(std::bit_cast<float>(read_le<std::uint32_t>(p)))
                             : std::bit_cast<double>(read_le<std::uint64_t>(p));
        if (!std::isfinite(v)) throw Error(ErrorKind::NonFinite, where + ": NaN or Inf in data");
        t.matrix.values(i, j) = v;
      }
    }
    for (auto it = entry.begin(); it != entry.end(); ++it)
      if (!reserved_entry_keys().contains(it.key())) t.attrs[it.key()] = it.value();
    c.tensors.push_back(std::move(t));
  }
  return c;
}

Container read_container(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorKind::IoFailure, "not a directory: " + dir.string());
  return decode_container(read_file(dir / "manifest.json"), read_file(dir / "weights.bin"));
}

void write_container(const Container& container, const fs::path& dir) {
  const EncodedContainer enc = encode_container(container);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::IoFailure, "cannot create " + dir.string() + ": " + ec.message());
  write_file(dir / "weights.bin", enc.weights);
  write_file(dir / "manifest.json", enc.manifest);
}

std::string content_hash(const EncodedContainer& encoded) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  EVP_DigestUpdate(ctx, encoded.manifest.data(), encoded.manifest.size());
  EVP_DigestUpdate(ctx, encoded.weights.data(), encoded.weights.size());
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

// ---- adapter bundles ---------------------------------------------------

AdapterBundle load_adapter_bundle(const fs::path& dir) {
  Container c = read_container(dir);
  if (c.header.contains("kind") && c.header.at("kind") != "adapter")
    throw Error(ErrorKind::MalformedManifest,
                dir.string() + " holds a \"" + c.header.at("kind").dump() + "\" bundle, not an adapter");
  AdapterBundle b;
  b.adapter_id = required<std::string>(c.header, "adapter_id", "manifest");
  b.base_model_id = required<std::string>(c.header, "base_model_id", "manifest");
  b.rank_hint = required<std::uint64_t>(c.header, "rank_hint", "manifest");
  for (auto& t : c.tensors) {
    if (!t.field.empty())
      throw Error(ErrorKind::MalformedManifest, "adapter site " + to_string(t.site) + " carries a field tag");
    b.sites.emplace(t.site, std::move(t.matrix));
  }
  return b;
}

void save_adapter_bundle(const AdapterBundle& bundle, const fs::path& dir) {
  Container c;
  c.header["adapter_id"] = bundle.adapter_id;
  c.header["base_model_id"] = bundle.base_model_id;
  c.header["rank_hint"] = bundle.rank_hint;
  for (const auto& [site, matrix] : bundle.sites) c.tensors.push_back({site, "", matrix, json::object()});
  write_container(c, dir);
}

SiteCatalog validate_collection(const std::vector<AdapterBundle>& bundles) {
  if (bundles.empty()) throw Error(ErrorKind::InvalidArgument, "empty adapter collection");

  std::map<SiteId, Eigen::Index> dims;
  std::map<SiteId, std::size_t> presence;
  for (const auto& b : bundles) {
    for (const auto& [site, matrix] : b.sites) {
      const Eigen::Index dim = ambient_dim(matrix, site.role);
      auto [it, inserted] = dims.emplace(site, dim);
      if (!inserted && it->second != dim)
        throw Error(ErrorKind::AmbientDimMismatch,
                    to_string(site) + " has ambient dimension " + std::to_string(it->second) +
                        " and " + std::to_string(dim) + " (adapter " + b.adapter_id + ")");
      ++presence[site];
    }
  }

  SiteCatalog catalog;
  for (const auto& [site, count] : presence) {
    if (count != bundles.size()) {
      catalog.warnings.push_back("site " + to_string(site) + " present in " + std::to_string(count) +
                                 " of " + std::to_string(bundles.size()) + " adapters; excluded");
      continue;
    }
    SiteInfo info;
    info.ambient_dim = dims.at(site);
    for (const auto& b : bundles) info.vector_counts.push_back(vector_count(b.sites.at(site), site.role));
    catalog.sites.emplace(site, std::move(info));
  }
  if (catalog.sites.empty())
    throw Error(ErrorKind::EmptyIntersection, "no site is shared by all adapters");
  return catalog;
}

SiteMatrix stack_site(const std::vector<AdapterBundle>& bundles, const SiteId& site) {
  Eigen::Index total = 0;
  Eigen::Index dim = -1;
  for (const auto& b : bundles) {
    auto it = b.sites.find(site);
    if (it == b.sites.end())
      throw Error(ErrorKind::InvalidArgument, "adapter " + b.adapter_id + " lacks site " + to_string(site));
    const Eigen::Index d = ambient_dim(it->second, site.role);
    if (dim >= 0 && d != dim)
      throw Error(ErrorKind::AmbientDimMismatch, to_string(site) + ": ambient dimension " +
                                                     std::to_string(d) + " vs " + std::to_string(dim));
    dim = d;
    total += vector_count(it->second, site.role);
  }
  if (dim < 0) throw Error(ErrorKind::InvalidArgument, "no adapters to stack");

  RowMatrix stacked(total, dim);
  Eigen::Index row = 0;
  for (const auto& b : bundles) {
    const RowMatrix v = site_vectors(b.sites.at(site), site.role);
    stacked.middleRows(row, v.rows()) = v;
    row += v.rows();
  }
  return SiteMatrix(std::move(stacked), DType::F64);
}

}  // namespace elorax
