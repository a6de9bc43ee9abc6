#pragma once

#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "elorax/adapter_store.hpp"
#include "elorax/subspace.hpp"

namespace elorax {

/// An adapter site expressed in a subspace: alpha is K_total x r, one column
/// per rank slot of the adapter.
struct SiteCoefficients {
  SiteId site;
  RowMatrix alpha;
  bool include_mean = true;
  /// Frobenius norm of the part the subspace cannot express. Only known right
  /// after fitting; coefficient bundles do not persist it (it goes to the
  /// residual CSV instead), so loaded coefficients report 0.
  double residual_fro = 0.0;
};

struct CoefficientSet {
  std::string adapter_id;
  std::map<SiteId, SiteCoefficients> sites;
  std::string subspace_ref;  // content hash of the subspace bundle
};

/// Closed-form least-squares coefficients. With orthonormal components this
/// is a plain projection: alpha = V (W' - mean)^T.
SiteCoefficients fit_coefficients(const SiteSubspace& subspace, const SiteMatrix& w, bool include_mean);

/// alpha^T V (+ mean) mapped back to the site's shape (r x n for A, m x r for B).
SiteMatrix reconstruct(const SiteSubspace& subspace, const SiteCoefficients& coeffs);

/// Projects every shared site of `adapter` onto `bundle`.
CoefficientSet project_adapter(const SubspaceBundle& bundle, const AdapterBundle& adapter, bool include_mean);

/// Rebuilds an adapter from coefficients. Throws SubspaceHashMismatch when the
/// coefficients were fitted against a different subspace bundle.
AdapterBundle reconstruct_adapter(const SubspaceBundle& bundle, const CoefficientSet& coeffs,
                                  const std::string& base_model_id = "");

/// Delta W = B_hat * A_hat (m x n), evaluated through the K_B x K_A core
/// V_B^T (alpha_B alpha_A^T) V_A plus the mean cross terms.
RowMatrix compose_update(const SiteSubspace& sub_a, const SiteCoefficients& coef_a,
                         const SiteSubspace& sub_b, const SiteCoefficients& coef_b);

struct ReconstructionRow {
  SiteId site;
  std::string adapter_id;  // "mean" for the per-site average row
  double fro_residual = 0.0;
  double rel_residual = 0.0;
};

inline constexpr double kRelativeResidualFloor = 1e-12;

/// Per (site, adapter) residuals of the analytic (mean-including) fit, then
/// one per-site mean row. Sites are visited in SiteId order.
std::vector<ReconstructionRow> reconstruction_report(const std::map<SiteId, SiteSubspace>& subspaces,
                                                     const std::vector<AdapterBundle>& bundles);

void write_reconstruction_csv(const std::vector<ReconstructionRow>& rows, std::ostream& out);

// ---- coefficient bundle ------------------------------------------------

Container to_container(const CoefficientSet& coeffs);
CoefficientSet coefficient_set_from_container(const Container& container);
void save_coefficient_set(const CoefficientSet& coeffs, const std::filesystem::path& dir);
CoefficientSet load_coefficient_set(const std::filesystem::path& dir);

}  // namespace elorax
