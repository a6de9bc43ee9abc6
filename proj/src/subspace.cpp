#include "elorax/subspace.hpp"

#include <algorithm>
#include <cmath>

#include "elorax/error.hpp"

namespace elorax {

using nlohmann::json;

std::string_view to_string(SvdMode mode) { return mode == SvdMode::Exact ? "exact" : "randomized"; }

SvdMode parse_svd_mode(std::string_view text) {
  if (text == "exact") return SvdMode::Exact;
  if (text == "randomized") return SvdMode::Randomized;
  throw Error(ErrorKind::InvalidArgument, "svd mode must be exact or randomized, got " + std::string(text));
}

KPolicy KPolicy::fixed(std::size_t k) {
  if (k < 1) throw Error(ErrorKind::InvalidArgument, "fixed K must be >= 1");
  KPolicy p;
  p.kind = Kind::FixedK;
  p.k = k;
  return p;
}

KPolicy KPolicy::variance(double tau) {
  if (!(tau > 0.0 && tau <= 1.0))
    throw Error(ErrorKind::InvalidArgument, "variance threshold must lie in (0, 1]");
  KPolicy p;
  p.kind = Kind::VarianceThreshold;
  p.threshold = tau;
  return p;
}

namespace {

bool same_matrix(const RowMatrix& a, const RowMatrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.size() == 0 || a == b);
}

bool same_vector(const Vector& a, const Vector& b) {
  return a.size() == b.size() && (a.size() == 0 || a == b);
}

RowMatrix thin_q(const RowMatrix& y) {
  Eigen::HouseholderQR<RowMatrix> qr(y);
  return qr.householderQ() * RowMatrix::Identity(y.rows(), y.cols());
}

// Smallest K whose cumulative energy reaches tau; `count` if none does.
Eigen::Index pick_k_by_variance(const Vector& sigma, double total, double tau) {
  double cum = 0.0;
  for (Eigen::Index i = 0; i < sigma.size(); ++i) {
    cum += sigma(i) * sigma(i);
    if (cum / total >= tau - 1e-12) return i + 1;
  }
  return sigma.size();
}

struct Decomposition {
  Vector sigma;
  RowMatrix right;  // rows are right singular vectors
  bool rank_deficient = false;
};

Decomposition exact_decomposition(const RowMatrix& centered) {
  Eigen::BDCSVD<RowMatrix> svd(centered, Eigen::ComputeThinV);
  Decomposition d;
  d.sigma = svd.singularValues();
  d.right = svd.matrixV().transpose();
  return d;
}

}  // namespace

bool SiteSubspace::operator==(const SiteSubspace& o) const {
  return site == o.site && ambient_dim == o.ambient_dim && same_vector(mean, o.mean) &&
         same_matrix(components, o.components) && same_vector(singular_values, o.singular_values) &&
         tail_energy == o.tail_energy && k_data == o.k_data && k_pseudo == o.k_pseudo &&
         seed == o.seed && svd_mode == o.svd_mode && degenerate == o.degenerate &&
         k_capped == o.k_capped && orthonormal == o.orthonormal;
}

RandomizedSvdResult randomized_svd(const RowMatrix& matrix, std::size_t k, std::size_t oversample,
                                   std::size_t power_iters, std::uint64_t seed) {
  const auto min_dim = static_cast<std::size_t>(std::min(matrix.rows(), matrix.cols()));
  if (k < 1 || k + oversample > min_dim)
    throw Error(ErrorKind::InvalidArgument, "randomized SVD needs 1 <= k and k + oversample <= " +
                                                std::to_string(min_dim));
  if (!matrix.allFinite()) throw Error(ErrorKind::NonFinite, "randomized SVD input");

  const auto width = static_cast<Eigen::Index>(k + oversample);
  Rng rng(seed);
  const RowMatrix omega = gaussian_matrix(matrix.cols(), width, rng);
  RowMatrix q = thin_q(matrix * omega);
  for (std::size_t it = 0; it < power_iters; ++it) {
    const RowMatrix z = thin_q(matrix.transpose() * q);
    q = thin_q(matrix * z);
  }
  const RowMatrix small = q.transpose() * matrix;  // width x cols
  Eigen::JacobiSVD<RowMatrix> svd(small, Eigen::ComputeThinV);

  RandomizedSvdResult out;
  const Vector& sigma = svd.singularValues();
  const auto rank = numerical_rank(sigma, matrix.rows(), matrix.cols());
  auto keep = static_cast<Eigen::Index>(k);
  if (rank < keep) {
    keep = rank;
    out.rank_deficient = true;
  }
  out.singular_values = sigma.head(keep);
  out.right_vectors = svd.matrixV().leftCols(keep).transpose();
  sign_normalize_rows(out.right_vectors);
  return out;
}

SiteSubspace extract_subspace(const SiteMatrix& stacked, const KPolicy& policy,
                              const ExtractOptions& options) {
  if (stacked.rows() < 1 || stacked.cols() < 1)
    throw Error(ErrorKind::InvalidArgument, "stacked matrix must be non-empty");
  if (!stacked.values.allFinite()) throw Error(ErrorKind::NonFinite, "stacked adapter vectors");

  SiteSubspace out;
  out.ambient_dim = stacked.cols();
  out.seed = options.seed;
  out.svd_mode = options.mode;
  out.mean = stacked.values.colwise().mean().transpose();
  out.components.resize(0, out.ambient_dim);

  const RowMatrix centered = stacked.values.rowwise() - out.mean.transpose();
  const double total = centered.squaredNorm();
  if (total == 0.0 || std::sqrt(total) <= 1e-12 * stacked.values.norm()) {
    out.degenerate = true;
    return out;
  }

  const Eigen::Index max_k = std::min(stacked.rows(), stacked.cols());
  Decomposition dec;
  if (options.mode == SvdMode::Exact) {
    dec = exact_decomposition(centered);
  } else {
    const auto run = [&](Eigen::Index k) {
      const auto oversample =
          std::min<std::size_t>(options.randomized.oversample, static_cast<std::size_t>(max_k - k));
      RandomizedSvdResult r = randomized_svd(centered, static_cast<std::size_t>(k), oversample,
                                             options.randomized.power_iters, options.seed);
      return Decomposition{std::move(r.singular_values), std::move(r.right_vectors), r.rank_deficient};
    };
    if (policy.kind == KPolicy::Kind::FixedK) {
      dec = run(std::min<Eigen::Index>(static_cast<Eigen::Index>(policy.k), max_k));
    } else {
      Eigen::Index k = std::min<Eigen::Index>(8, max_k);
      for (;;) {
        dec = run(k);
        const double captured = dec.sigma.squaredNorm();
        if (dec.rank_deficient || k == max_k || captured / total >= policy.threshold - 1e-12) break;
        k = std::min(2 * k, max_k);
      }
    }
  }

  out.singular_values = dec.sigma;
  out.tail_energy = options.mode == SvdMode::Exact ? 0.0 : std::max(0.0, total - dec.sigma.squaredNorm());
  const Eigen::Index rank = numerical_rank(dec.sigma, stacked.rows(), stacked.cols());
  if (rank == 0) {
    out.degenerate = true;
    return out;
  }

  Eigen::Index k = 0;
  if (policy.kind == KPolicy::Kind::FixedK) {
    k = static_cast<Eigen::Index>(policy.k);
  } else {
    k = pick_k_by_variance(dec.sigma, dec.sigma.squaredNorm() + out.tail_energy, policy.threshold);
  }
  if (k > rank) {
    out.k_capped = true;
    k = rank;
  }

  out.components = dec.right.topRows(k);
  sign_normalize_rows(out.components);
  out.k_data = k;
  return out;
}

double explained_variance(const SiteSubspace& subspace, Eigen::Index k) {
  if (k < 1 || k > subspace.k_data || k > subspace.singular_values.size())
    throw Error(ErrorKind::OutOfRange, "k=" + std::to_string(k) + " outside [1, " +
                                           std::to_string(subspace.k_data) + "]");
  const double total = subspace.singular_values.squaredNorm() + subspace.tail_energy;
  return subspace.singular_values.head(k).squaredNorm() / total;
}

std::vector<double> explained_variance_curve(const SiteSubspace& subspace) {
  std::vector<double> curve;
  const double total = subspace.singular_values.squaredNorm() + subspace.tail_energy;
  if (!(total > 0.0)) return curve;
  double cum = 0.0;
  for (Eigen::Index i = 0; i < subspace.singular_values.size(); ++i) {
    cum += subspace.singular_values(i) * subspace.singular_values(i);
    curve.push_back(cum / total);
  }
  return curve;
}

SiteSubspace augment_pseudo(const SiteSubspace& subspace, std::size_t p, std::uint64_t seed,
                            const VectorSampler& sampler) {
  SiteSubspace out = subspace;
  const Eigen::Index dim = subspace.ambient_dim;
  for (std::size_t slot = 0; slot < p; ++slot) {
    bool accepted = false;
    for (int attempt = 0; attempt <= kMaxPseudoRetries && !accepted; ++attempt) {
      const Vector candidate = sampler(dim);
      if (candidate.size() != dim)
        throw Error(ErrorKind::DimMismatch, "sampler returned a vector of the wrong length");
      const double pre_norm = candidate.norm();
      if (!(pre_norm > 0.0) || !std::isfinite(pre_norm)) continue;
      Vector residual = orthogonalize_against(out.components, candidate);
      const double post_norm = residual.norm();
      if (post_norm < kRejectRelativeNorm * pre_norm) continue;  // null after projection
      residual /= post_norm;
      out.components.conservativeResize(out.components.rows() + 1, dim);
      out.components.row(out.components.rows() - 1) = residual.transpose();
      accepted = true;
    }
    if (!accepted)
      throw Error(ErrorKind::AugmentationExhausted,
                  "no direction orthogonal to " + std::to_string(out.components.rows()) +
                      " components found in " + std::to_string(kMaxPseudoRetries + 1) + " draws");
    ++out.k_pseudo;
  }
  out.seed = seed;
  return out;
}

SiteSubspace augment_pseudo(const SiteSubspace& subspace, std::size_t p, std::uint64_t seed) {
  Rng rng(seed);
  return augment_pseudo(subspace, p, seed, [&rng](Eigen::Index dim) { return gaussian_vector(dim, rng); });
}

SiteSubspace augment_unorthogonalized(const SiteSubspace& subspace, std::size_t p, std::uint64_t seed) {
  SiteSubspace out = subspace;
  Rng rng(seed);
  const Eigen::Index dim = subspace.ambient_dim;
  for (std::size_t i = 0; i < p; ++i) {
    Vector v = gaussian_vector(dim, rng);
    v /= v.norm();
    out.components.conservativeResize(out.components.rows() + 1, dim);
    out.components.row(out.components.rows() - 1) = v.transpose();
    ++out.k_pseudo;
  }
  out.seed = seed;
  out.orthonormal = p == 0 && subspace.orthonormal;
  return out;
}

SiteSubspace make_random_subspace(Eigen::Index ambient_dim, std::size_t k, std::uint64_t seed) {
  if (ambient_dim < 1) throw Error(ErrorKind::InvalidArgument, "ambient dimension must be >= 1");
  if (static_cast<Eigen::Index>(k) > ambient_dim)
    throw Error(ErrorKind::InvalidArgument, "cannot draw " + std::to_string(k) +
                                                " orthonormal directions in dimension " +
                                                std::to_string(ambient_dim));
  SiteSubspace base;
  base.ambient_dim = ambient_dim;
  base.mean = Vector::Zero(ambient_dim);
  base.components.resize(0, ambient_dim);
  return augment_pseudo(base, k, seed);
}

// ---- bundle ------------------------------------------------------------

Container to_container(const SubspaceBundle& bundle) {
  Container c;
  Eigen::Index k_data = 0;
  Eigen::Index k_pseudo = 0;
  for (const auto& [site, s] : bundle.sites) {
    k_data = std::max(k_data, s.k_data);
    k_pseudo = std::max(k_pseudo, s.k_pseudo);

    json attrs = {{"k_data", s.k_data},
                  {"k_pseudo", s.k_pseudo},
                  {"tail_energy", s.tail_energy},
                  {"seed", s.seed},
                  {"svd_mode", std::string(to_string(s.svd_mode))},
                  {"degenerate", s.degenerate},
                  {"k_capped", s.k_capped},
                  {"orthonormal", s.orthonormal}};
    c.tensors.push_back({site, "mean", SiteMatrix(s.mean.transpose(), DType::F64), attrs});
    if (s.components.rows() > 0)
      c.tensors.push_back({site, "components", SiteMatrix(s.components, DType::F64), json::object()});
    if (s.singular_values.size() > 0)
      c.tensors.push_back(
          {site, "singular_values", SiteMatrix(s.singular_values.transpose(), DType::F64), json::object()});
  }
  c.header = {{"kind", "subspace"},
              {"k_data", k_data},
              {"k_pseudo", k_pseudo},
              {"seed", bundle.seed},
              {"svd_mode", std::string(to_string(bundle.svd_mode))},
              {"source_adapter_ids", bundle.source_adapter_ids}};
  return c;
}

namespace {

template <typename T>
T attr(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) throw Error(ErrorKind::MalformedManifest, where + ": missing \"" + key + "\"");
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw Error(ErrorKind::MalformedManifest, where + ": bad \"" + key + "\"");
  }
}

}  // namespace

SubspaceBundle subspace_bundle_from_container(const Container& c) {
  if (!c.header.contains("kind") || c.header.at("kind") != "subspace")
    throw Error(ErrorKind::MalformedManifest, "not a subspace bundle");
  SubspaceBundle b;
  b.seed = attr<std::uint64_t>(c.header, "seed", "manifest");
  b.svd_mode = parse_svd_mode(attr<std::string>(c.header, "svd_mode", "manifest"));
  b.source_adapter_ids = attr<std::vector<std::string>>(c.header, "source_adapter_ids", "manifest");

  for (const auto& t : c.tensors) {
    if (t.field == "mean") {
      const std::string where = to_string(t.site);
      if (t.matrix.rows() != 1) throw Error(ErrorKind::ShapeMismatch, where + ": mean must be 1 x dim");
      SiteSubspace& s = b.sites[t.site];
      s.site = t.site;
      s.ambient_dim = t.matrix.cols();
      s.mean = t.matrix.values.row(0).transpose();
      s.k_data = attr<Eigen::Index>(t.attrs, "k_data", where);
      s.k_pseudo = attr<Eigen::Index>(t.attrs, "k_pseudo", where);
      s.tail_energy = attr<double>(t.attrs, "tail_energy", where);
      s.seed = attr<std::uint64_t>(t.attrs, "seed", where);
      s.svd_mode = parse_svd_mode(attr<std::string>(t.attrs, "svd_mode", where));
      s.degenerate = attr<bool>(t.attrs, "degenerate", where);
      s.k_capped = attr<bool>(t.attrs, "k_capped", where);
      s.orthonormal = attr<bool>(t.attrs, "orthonormal", where);
    }
  }
  for (const auto& t : c.tensors) {
    if (t.field == "mean") continue;
    auto it = b.sites.find(t.site);
    if (it == b.sites.end())
      throw Error(ErrorKind::MalformedManifest, to_string(t.site) + ": tensor without a mean entry");
    SiteSubspace& s = it->second;
    if (t.field == "components") {
      s.components = t.matrix.values;
    } else if (t.field == "singular_values") {
      if (t.matrix.rows() != 1)
        throw Error(ErrorKind::ShapeMismatch, to_string(t.site) + ": singular_values must be 1 x n");
      s.singular_values = t.matrix.values.row(0).transpose();
    } else {
      throw Error(ErrorKind::MalformedManifest, to_string(t.site) + ": unknown field \"" + t.field + "\"");
    }
  }
  for (auto& [site, s] : b.sites) {
    const std::string where = to_string(site);
    if (s.components.size() == 0) s.components.resize(0, s.ambient_dim);
    if (s.components.cols() != s.ambient_dim)
      throw Error(ErrorKind::ShapeMismatch, where + ": components and mean disagree on dimension");
    if (s.k_data + s.k_pseudo != s.components.rows())
      throw Error(ErrorKind::ShapeMismatch, where + ": k_data + k_pseudo != component rows");
    if (s.k_data > s.singular_values.size())
      throw Error(ErrorKind::ShapeMismatch, where + ": fewer singular values than k_data");
  }
  return b;
}

void save_subspace_bundle(const SubspaceBundle& bundle, const std::filesystem::path& dir) {
  write_container(to_container(bundle), dir);
}

SubspaceBundle load_subspace_bundle(const std::filesystem::path& dir) {
  return subspace_bundle_from_container(read_container(dir));
}

std::string subspace_hash(const SubspaceBundle& bundle) {
  return content_hash(encode_container(to_container(bundle)));
}

}  // namespace elorax
