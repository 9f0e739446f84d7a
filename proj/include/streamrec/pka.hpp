#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "streamrec/csa.hpp"

namespace streamrec {

struct NeighborSet {
    std::int64_t user = 0;
    std::vector<std::int64_t> neighbors; // existing users, closest first
    std::vector<real> weights;           // softmax(c . c' / tau), sums to 1
    real tau = real(1);
    bool clamped = false; // fewer than K existing users were available
};

/// Top-K existing users by cosine distance between current-interest
/// contexts (ties by ascending user id); weights from a softmax over the
/// raw dot products scaled by 1/tau.
NeighborSet find_neighbors(std::int64_t new_user,
                           const std::map<std::int64_t, std::vector<real>>& contexts,
                           const std::vector<std::int64_t>& existing_users, int k,
                           real tau);

/// Pseudo-historical memories: the convex combination of the neighbors'
/// genuine memories under the NeighborSet weights.
std::vector<MemoryPair> make_pseudo_slots(const NeighborSet& neighbors,
                                          const UserMemoryStore& store);

} // namespace streamrec
