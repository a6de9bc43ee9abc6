#include "elorax/projection.hpp"

#include <algorithm>
#include <cmath>

#include "elorax/csv.hpp"
#include "elorax/error.hpp"

namespace elorax {

using nlohmann::json;

namespace {

RowMatrix centered_vectors(const SiteSubspace& subspace, const SiteMatrix& w, bool include_mean) {
  RowMatrix vectors = site_vectors(w, subspace.site.role);
  if (vectors.cols() != subspace.ambient_dim)
    throw Error(ErrorKind::DimMismatch, to_string(subspace.site) + ": adapter ambient dimension " +
                                            std::to_string(vectors.cols()) + " but subspace has " +
                                            std::to_string(subspace.ambient_dim));
  if (include_mean) vectors.rowwise() -= subspace.mean.transpose();
  return vectors;
}

}  // namespace

SiteCoefficients fit_coefficients(const SiteSubspace& subspace, const SiteMatrix& w, bool include_mean) {
  const RowMatrix target = centered_vectors(subspace, w, include_mean);  // r x dim
  const RowMatrix& v = subspace.components;                               // K x dim

  SiteCoefficients out;
  out.site = subspace.site;
  out.include_mean = include_mean;
  if (subspace.orthonormal) {
    out.alpha = v * target.transpose();
  } else {
    // General least squares for bases that are not orthonormal.
    const RowMatrix gram = v * v.transpose();
    out.alpha = gram.ldlt().solve(v * target.transpose());
  }
  const RowMatrix residual = target - out.alpha.transpose() * v;
  out.residual_fro = residual.norm();
  return out;
}

SiteMatrix reconstruct(const SiteSubspace& subspace, const SiteCoefficients& coeffs) {
  if (coeffs.alpha.rows() != subspace.k_total())
    throw Error(ErrorKind::DimMismatch, to_string(subspace.site) + ": alpha has " +
                                            std::to_string(coeffs.alpha.rows()) + " rows, subspace has " +
                                            std::to_string(subspace.k_total()) + " components");
  RowMatrix vectors = subspace.k_total() == 0
                          ? RowMatrix::Zero(coeffs.alpha.cols(), subspace.ambient_dim)
                          : RowMatrix(coeffs.alpha.transpose() * subspace.components);  // r x dim
  if (coeffs.include_mean) vectors.rowwise() += subspace.mean.transpose();
  return SiteMatrix(from_site_vectors(vectors, subspace.site.role), DType::F64);
}

CoefficientSet project_adapter(const SubspaceBundle& bundle, const AdapterBundle& adapter, bool include_mean) {
  CoefficientSet out;
  out.adapter_id = adapter.adapter_id;
  out.subspace_ref = subspace_hash(bundle);
  for (const auto& [site, subspace] : bundle.sites) {
    auto it = adapter.sites.find(site);
    if (it == adapter.sites.end())
      throw Error(ErrorKind::DimMismatch, "adapter " + adapter.adapter_id + " lacks site " + to_string(site));
    out.sites.emplace(site, fit_coefficients(subspace, it->second, include_mean));
  }
  return out;
}

AdapterBundle reconstruct_adapter(const SubspaceBundle& bundle, const CoefficientSet& coeffs,
                                  const std::string& base_model_id) {
  const std::string actual = subspace_hash(bundle);
  if (coeffs.subspace_ref != actual)
    throw Error(ErrorKind::SubspaceHashMismatch,
                "coefficients reference subspace " + coeffs.subspace_ref + " but bundle hashes to " + actual);
  AdapterBundle out;
  out.adapter_id = coeffs.adapter_id;
  out.base_model_id = base_model_id;
  for (const auto& [site, c] : coeffs.sites) {
    auto it = bundle.sites.find(site);
    if (it == bundle.sites.end())
      throw Error(ErrorKind::DimMismatch, "subspace bundle lacks site " + to_string(site));
    out.sites.emplace(site, reconstruct(it->second, c));
    out.rank_hint = std::max<std::uint64_t>(out.rank_hint, static_cast<std::uint64_t>(c.alpha.cols()));
  }
  return out;
}

RowMatrix compose_update(const SiteSubspace& sub_a, const SiteCoefficients& coef_a,
                         const SiteSubspace& sub_b, const SiteCoefficients& coef_b) {
  if (coef_a.alpha.cols() != coef_b.alpha.cols())
    throw Error(ErrorKind::RankMismatch, "alpha_A has r=" + std::to_string(coef_a.alpha.cols()) +
                                             " but alpha_B has r=" + std::to_string(coef_b.alpha.cols()));
  if (coef_a.alpha.rows() != sub_a.k_total() || coef_b.alpha.rows() != sub_b.k_total())
    throw Error(ErrorKind::DimMismatch, "alpha rows do not match component counts");

  const Eigen::Index m = sub_b.ambient_dim;
  const Eigen::Index n = sub_a.ambient_dim;
  const double r = static_cast<double>(coef_a.alpha.cols());
  RowMatrix delta = RowMatrix::Zero(m, n);
  if (sub_a.k_total() > 0 && sub_b.k_total() > 0) {
    const RowMatrix core = coef_b.alpha * coef_a.alpha.transpose();  // K_B x K_A
    delta.noalias() += sub_b.components.transpose() * (core * sub_a.components);
  }
  // Mean terms: B_hat = V_B^T a_B + mu_B 1^T, A_hat = a_A^T V_A + 1 mu_A^T.
  if (coef_a.include_mean && sub_b.k_total() > 0) {
    const Vector b_sum = sub_b.components.transpose() * coef_b.alpha.rowwise().sum();  // m
    delta.noalias() += b_sum * sub_a.mean.transpose();
  }
  if (coef_b.include_mean && sub_a.k_total() > 0) {
    const Vector a_sum = sub_a.components.transpose() * coef_a.alpha.rowwise().sum();  // n
    delta.noalias() += sub_b.mean * a_sum.transpose();
  }
  if (coef_a.include_mean && coef_b.include_mean) delta.noalias() += r * sub_b.mean * sub_a.mean.transpose();
  return delta;
}

std::vector<ReconstructionRow> reconstruction_report(const std::map<SiteId, SiteSubspace>& subspaces,
                                                     const std::vector<AdapterBundle>& bundles) {
  std::vector<ReconstructionRow> rows;
  for (const auto& [site, subspace] : subspaces) {
    double sum = 0.0;
    double rel_sum = 0.0;
    std::size_t count = 0;
    for (const auto& b : bundles) {
      auto it = b.sites.find(site);
      if (it == b.sites.end())
        throw Error(ErrorKind::DimMismatch, "adapter " + b.adapter_id + " lacks site " + to_string(site));
      const SiteCoefficients c = fit_coefficients(subspace, it->second, true);
      const double denom = centered_vectors(subspace, it->second, true).norm();
      const double rel = denom < kRelativeResidualFloor ? 0.0 : c.residual_fro / denom;
      rows.push_back({site, b.adapter_id, c.residual_fro, rel});
      sum += c.residual_fro;
      rel_sum += rel;
      ++count;
    }
    if (count > 0) rows.push_back({site, "mean", sum / count, rel_sum / count});
  }
  return rows;
}

void write_reconstruction_csv(const std::vector<ReconstructionRow>& rows, std::ostream& out) {
  out << "site_name,role,adapter_id,fro_residual,rel_residual\n";
  for (const auto& r : rows)
    out << r.site.name << ',' << to_string(r.site.role) << ',' << r.adapter_id << ','
        << format_double(r.fro_residual) << ',' << format_double(r.rel_residual) << '\n';
}

// ---- coefficient bundle ------------------------------------------------

Container to_container(const CoefficientSet& coeffs) {
  Container c;
  bool all_include_mean = true;
  for (const auto& [site, sc] : coeffs.sites) {
    all_include_mean = all_include_mean && sc.include_mean;
    if (sc.alpha.rows() == 0 || sc.alpha.cols() == 0)
      throw Error(ErrorKind::ShapeMismatch, to_string(site) + ": cannot store an empty alpha");
    c.tensors.push_back({site, "alpha", SiteMatrix(sc.alpha, DType::F32), json{{"include_mean", sc.include_mean}}});
  }
  c.header = {{"kind", "coefficients"},
              {"adapter_id", coeffs.adapter_id},
              {"subspace_ref", coeffs.subspace_ref},
              {"include_mean", all_include_mean}};
  return c;
}

CoefficientSet coefficient_set_from_container(const Container& c) {
  if (!c.header.contains("kind") || c.header.at("kind") != "coefficients")
    throw Error(ErrorKind::MalformedManifest, "not a coefficient bundle");
  CoefficientSet out;
  try {
    out.adapter_id = c.header.at("adapter_id").get<std::string>();
    out.subspace_ref = c.header.at("subspace_ref").get<std::string>();
    const bool default_mean = c.header.at("include_mean").get<bool>();
    for (const auto& t : c.tensors) {
      if (t.field != "alpha")
        throw Error(ErrorKind::MalformedManifest, to_string(t.site) + ": unexpected field \"" + t.field + "\"");
      SiteCoefficients sc;
      sc.site = t.site;
      sc.alpha = t.matrix.values;
      sc.include_mean = t.attrs.contains("include_mean") ? t.attrs.at("include_mean").get<bool>() : default_mean;
      out.sites.emplace(t.site, std::move(sc));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::MalformedManifest, std::string("coefficient manifest: ") + e.what());
  }
  return out;
}

void save_coefficient_set(const CoefficientSet& coeffs, const std::filesystem::path& dir) {
  write_container(to_container(coeffs), dir);
}

CoefficientSet load_coefficient_set(const std::filesystem::path& dir) {
  return coefficient_set_from_container(read_container(dir));
}

}  // namespace elorax
