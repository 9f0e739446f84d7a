#include "streamrec/pka.hpp"

#include <algorithm>
#include <cmath>

#include "streamrec/cie.hpp"

namespace streamrec {

NeighborSet find_neighbors(std::int64_t new_user,
                           const std::map<std::int64_t, std::vector<real>>& contexts,
                           const std::vector<std::int64_t>& existing_users, int k,
                           real tau) {
    if (k < 1) raise(ErrorCode::Usage, "find_neighbors: k must be >= 1");
    if (existing_users.empty())
        raise(ErrorCode::Usage, "find_neighbors: no existing users");
    auto self = contexts.find(new_user);
    if (self == contexts.end())
        raise(ErrorCode::Consistency, "find_neighbors: missing context for new user");

    NeighborSet result;
    result.user = new_user;
    result.tau = tau;

    std::vector<std::pair<real, std::int64_t>> ranked;
    ranked.reserve(existing_users.size());
    for (std::int64_t u : existing_users) {
        auto it = contexts.find(u);
        if (it == contexts.end())
            raise(ErrorCode::Consistency,
                  "find_neighbors: missing context for user " + std::to_string(u));
        ranked.emplace_back(cosine_distance(self->second, it->second), u);
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first < b.first;
        return a.second < b.second;
    });
    std::size_t take = static_cast<std::size_t>(k);
    if (take > ranked.size()) {
        take = ranked.size();
        result.clamped = true;
    }

    // Softmax over raw dot products (not the ranking distance), scaled by
    // 1/tau; max-subtraction keeps the exponentials in range.
    std::vector<real> logits(take);
    for (std::size_t i = 0; i < take; ++i) {
        const auto& cu = self->second;
        const auto& cv = contexts.at(ranked[i].second);
        real dot = 0;
        for (std::size_t j = 0; j < cu.size(); ++j) dot += cu[j] * cv[j];
        logits[i] = dot / tau;
    }
    const real mx = *std::max_element(logits.begin(), logits.end());
    real sum = 0;
    for (real& l : logits) {
        l = std::exp(l - mx);
        sum += l;
    }
    for (std::size_t i = 0; i < take; ++i) {
        result.neighbors.push_back(ranked[i].second);
        result.weights.push_back(logits[i] / sum);
    }
    return result;
}

std::vector<MemoryPair> make_pseudo_slots(const NeighborSet& neighbors,
                                          const UserMemoryStore& store) {
    if (neighbors.neighbors.empty())
        raise(ErrorCode::Usage, "make_pseudo_slots: empty neighbor set");
    std::vector<MemoryPair> slots;
    slots.reserve(store.slot_count());
    for (std::size_t i = 0; i < store.slot_count(); ++i)
        slots.push_back(MemoryPair::zeros(store.dh()));
    for (std::size_t n = 0; n < neighbors.neighbors.size(); ++n) {
        const UserMemory* mem = store.find(neighbors.neighbors[n]);
        if (!mem || mem->pseudo)
            raise(ErrorCode::Consistency,
                  "make_pseudo_slots: neighbor " +
                      std::to_string(neighbors.neighbors[n]) +
                      " has no genuine memories");
        for (std::size_t s = 0; s < slots.size(); ++s)
            slots[s].scale_add(neighbors.weights[n], mem->slots[s]);
    }
    return slots;
}

} // namespace streamrec
