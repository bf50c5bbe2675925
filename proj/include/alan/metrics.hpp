#pragma once

// Rank-based retrieval metrics over a gallery x query similarity matrix.

#include <algorithm>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "alan/alignment.hpp"
#include "alan/core.hpp"
#include "alan/encoders.hpp"

namespace alan {

/// Per-query alignment weights: (w_object, w_motion) at CLS and AVG level.
struct StreamWeights {
  double cls_object = 0.5, cls_motion = 0.5;
  double avg_object = 0.5, avg_motion = 0.5;
};

template <typename T>
StreamWeights query_weights(const Alignment<T>& align, const DualRepresentation<T>& q) {
  const auto w = align.weights(q);
  return {static_cast<double>(w.cls.first), static_cast<double>(w.cls.second), static_cast<double>(w.avg.first),
          static_cast<double>(w.avg.second)};
}

namespace detail {

inline MatD normalized_rows(const std::vector<DualRepresentation<double>>& reps,
                            RowVec<double> DualRepresentation<double>::*field) {
  if (reps.empty()) return MatD(0, 0);
  const Eigen::Index d = (reps.front().*field).cols();
  MatD m(static_cast<Eigen::Index>(reps.size()), d);
  for (std::size_t i = 0; i < reps.size(); ++i) {
    const auto& v = reps[i].*field;
    if (v.cols() != d) throw ShapeError("representation width mismatch");
    const double n = v.norm();
    if (n == 0.0) throw NumericError("cosine similarity of a zero vector is undefined");
    m.row(static_cast<Eigen::Index>(i)) = v / n;
  }
  return m;
}

}  // namespace detail

/// S(g, q) = alpha * s_cls(g, q) + (1 - alpha) * s_avg(g, q). Each item is
/// represented once; the matrix is a pure map over pairs.
inline MatD build_similarity_matrix(const std::vector<DualRepresentation<double>>& gallery,
                                    const std::vector<DualRepresentation<double>>& queries,
                                    const std::vector<StreamWeights>& weights, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0,1]");
  if (weights.size() != queries.size()) throw ShapeError("one weight set per query");
  if (gallery.empty() || queries.empty()) return MatD::Zero(static_cast<Eigen::Index>(gallery.size()), static_cast<Eigen::Index>(queries.size()));
  if (gallery.front().g_object.cols() != queries.front().g_object.cols()) throw ShapeError("gallery/query width mismatch");
  using R = DualRepresentation<double>;
  auto block = [&](RowVec<double> R::*field) {
    return MatD(detail::normalized_rows(gallery, field) * detail::normalized_rows(queries, field).transpose());
  };
  const auto Q = static_cast<Eigen::Index>(queries.size());
  RowVec<double> wgo(Q), wgm(Q), who(Q), whm(Q);
  for (Eigen::Index j = 0; j < Q; ++j) {
    const auto& w = weights[static_cast<std::size_t>(j)];
    wgo(j) = alpha * w.cls_object;
    wgm(j) = alpha * w.cls_motion;
    who(j) = (1.0 - alpha) * w.avg_object;
    whm(j) = (1.0 - alpha) * w.avg_motion;
  }
  MatD S = block(&R::g_object) * wgo.asDiagonal();
  S += block(&R::g_motion) * wgm.asDiagonal();
  S += block(&R::h_object) * who.asDiagonal();
  S += block(&R::h_motion) * whm.asDiagonal();
  return S;
}

struct DirectionMetrics {
  double r1 = 0, r5 = 0, r10 = 0;  // percentages
  double median_rank = 0;
  double mean_rank = 0;
  std::vector<std::size_t> ranks;
};

struct RetrievalReport {
  DirectionMetrics query_to_video;
  DirectionMetrics video_to_query;
  double sum_r = 0;
  std::size_t gallery_size = 0;
  std::size_t query_count = 0;
  double seconds_per_pair = 0;  // wall clock, encoding + similarity
};

inline double median_of(std::vector<std::size_t> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? static_cast<double>(v[n / 2]) : 0.5 * static_cast<double>(v[n / 2 - 1] + v[n / 2]);
}

inline DirectionMetrics summarize_ranks(std::vector<std::size_t> ranks) {
  DirectionMetrics m;
  if (ranks.empty()) return m;
  const double n = static_cast<double>(ranks.size());
  auto pct = [&](std::size_t k) {
    return 100.0 * static_cast<double>(std::count_if(ranks.begin(), ranks.end(), [k](auto r) { return r <= k; })) / n;
  };
  m.r1 = pct(1);
  m.r5 = pct(5);
  m.r10 = pct(10);
  m.median_rank = median_of(ranks);
  double sum = 0;
  for (auto r : ranks) sum += static_cast<double>(r);
  m.mean_rank = sum / n;
  m.ranks = std::move(ranks);
  return m;
}

/// `pairing[q]` is the gallery index of query q's correct item. Ranks are
/// pessimistic: every competitor scoring >= the correct item ranks ahead.
inline RetrievalReport rank_metrics(const MatD& S, const std::vector<std::size_t>& pairing) {
  const auto G = static_cast<std::size_t>(S.rows());
  const auto Q = static_cast<std::size_t>(S.cols());
  if (pairing.size() != Q) throw ValidationError("rank_metrics: one pairing entry per query required");
  for (auto g : pairing) {
    if (g >= G) throw ValidationError("rank_metrics: pairing references gallery item " + std::to_string(g) + " of " + std::to_string(G));
  }
  std::vector<std::size_t> q2v(Q);
  for (std::size_t q = 0; q < Q; ++q) {
    const auto col = static_cast<Eigen::Index>(q);
    const double target = S(static_cast<Eigen::Index>(pairing[q]), col);
    std::size_t rank = 1;
    for (std::size_t g = 0; g < G; ++g) {
      if (g != pairing[q] && S(static_cast<Eigen::Index>(g), col) >= target) ++rank;
    }
    q2v[q] = rank;
  }
  std::vector<std::vector<std::size_t>> correct(G);
  for (std::size_t q = 0; q < Q; ++q) correct[pairing[q]].push_back(q);
  std::vector<std::size_t> v2q;
  for (std::size_t g = 0; g < G; ++g) {
    if (correct[g].empty()) continue;
    const auto row = static_cast<Eigen::Index>(g);
    double best = S(row, static_cast<Eigen::Index>(correct[g].front()));
    for (auto q : correct[g]) best = std::max(best, S(row, static_cast<Eigen::Index>(q)));
    std::size_t rank = 1;
    for (std::size_t q = 0; q < Q; ++q) {
      if (pairing[q] != g && S(row, static_cast<Eigen::Index>(q)) >= best) ++rank;
    }
    v2q.push_back(rank);
  }
  RetrievalReport r;
  r.gallery_size = G;
  r.query_count = Q;
  r.query_to_video = summarize_ranks(std::move(q2v));
  r.video_to_query = summarize_ranks(std::move(v2q));
  r.sum_r = r.query_to_video.r1 + r.query_to_video.r5 + r.query_to_video.r10 + r.video_to_query.r1 +
            r.video_to_query.r5 + r.video_to_query.r10;
  return r;
}

inline nlohmann::json to_json(const RetrievalReport& r, const char* query_name = "query") {
  auto dir = [](const DirectionMetrics& m) {
    return nlohmann::json{{"R@1", m.r1}, {"R@5", m.r5}, {"R@10", m.r10}, {"MdR", m.median_rank}, {"MnR", m.mean_rank}};
  };
  return {{std::string(query_name) + "_to_video", dir(r.query_to_video)},
          {"video_to_" + std::string(query_name), dir(r.video_to_query)},
          {"SumR", r.sum_r},
          {"gallery_size", r.gallery_size},
          {"query_count", r.query_count},
          {"seconds_per_pair", r.seconds_per_pair}};
}

inline std::string format_table(const RetrievalReport& r, const std::string& query_name = "Query") {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1);
  os << std::left << std::setw(16) << "Direction" << std::right << std::setw(8) << "R@1" << std::setw(8) << "R@5"
     << std::setw(8) << "R@10" << std::setw(9) << "MdR" << "\n";
  auto line = [&](const std::string& name, const DirectionMetrics& m) {
    os << std::left << std::setw(16) << name << std::right << std::setw(8) << m.r1 << std::setw(8) << m.r5
       << std::setw(8) << m.r10 << std::setw(9) << m.median_rank << "\n";
  };
  line(query_name + "->Video", r.query_to_video);
  line("Video->" + query_name, r.video_to_query);
  os << "SumR " << r.sum_r << "   (" << r.query_count << " queries, gallery " << r.gallery_size << ", "
     << std::scientific << std::setprecision(2) << r.seconds_per_pair << " s/pair)\n";
  return os.str();
}

}  // namespace alan
