#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "streamrec/common.hpp"
#include "streamrec/rng.hpp"

namespace streamrec {

struct Interaction {
    std::int64_t user_id = 0;
    std::int64_t item_id = 0;
    std::int64_t timestamp = 0;
};

struct UserSequence {
    std::int64_t user_id = 0;
    std::vector<std::int64_t> items; // non-decreasing timestamp order
    int block_index = 0;
};

struct DataBlock {
    int index = 0; // 1-based
    std::map<std::int64_t, UserSequence> sequences;
    std::set<std::int64_t> users;
    std::set<std::int64_t> items;
    std::set<std::int64_t> cumulative_items; // union over blocks <= index
    std::set<std::int64_t> new_users;        // first appearance in this block
    std::size_t n_interactions = 0;
};

struct BlockSplit {
    std::map<std::int64_t, UserSequence> train; // all but last item
    std::map<std::int64_t, std::int64_t> targets;
    int excluded_short = 0; // sequences of length 1, skipped with a warning count
};

struct IngestResult {
    std::vector<Interaction> interactions; // sorted by (user, timestamp), dense ids
    std::size_t n_users = 0;
    std::size_t n_items = 0;
    std::vector<std::string> user_names; // dense id -> original token
    std::vector<std::string> item_names;
};

/// Parse `user,item,timestamp` lines (optional header), remap ids to dense
/// 0-based integers in first-appearance order and stably sort by
/// (user, timestamp).
IngestResult ingest_csv(const std::string& path);

std::vector<DataBlock> split_blocks(const std::vector<Interaction>& interactions,
                                    int num_blocks);
/// `boundaries` are strictly increasing upper edges; interactions with
/// timestamp < boundaries[i] land in block i+1, the rest in the final block.
std::vector<DataBlock> split_blocks(const std::vector<Interaction>& interactions,
                                    const std::vector<std::int64_t>& boundaries);

/// Per training position (one per predicted next item, so sequence length - 1
/// groups), draw n_neg distinct items uniformly from pool \ sequence items.
std::vector<std::vector<std::int64_t>> sample_negatives(
    const UserSequence& seq, const std::set<std::int64_t>& pool, int n_neg, Rng& rng);

BlockSplit leave_one_out(const DataBlock& block);

struct SyntheticConfig {
    int n_users = 200;
    int n_items = 500;
    int n_blocks = 4;
    double drift_rate = 0.3;
    double new_user_rate = 0.1;
    std::uint64_t seed = 1;
    // Shape of the stream; all structural decisions follow an integer-only
    // RNG path so output is platform-invariant.
    int n_clusters = 8;
    int len_min = 4;
    int len_max = 12;
    std::uint32_t activity_ppm = 900000;    // P(existing user active in a block)
    std::uint32_t heavy_user_ppm = 150000;  // P(user is a heavy user)
    int heavy_mult = 3;                     // heavy users: length multiplier
    int n_hyperactive = 0;                  // first ids get hyperactive_mult x length
    int hyperactive_mult = 10;
    std::uint32_t cluster_focus_ppm = 850000; // P(item drawn from own cluster)
};

/// Users draw items from per-user latent interest clusters; assignments
/// drift between blocks with probability drift_rate; every block after the
/// first introduces ceil(new_user_rate * n_users) unseen users.
std::vector<DataBlock> generate_synthetic_stream(const SyntheticConfig& cfg);

/// Block manifest + serialized blocks as JSON under `dir`.
void save_blocks(const std::vector<DataBlock>& blocks, const std::string& dir);
std::vector<DataBlock> load_blocks(const std::string& dir);
std::string block_manifest_json(const std::vector<DataBlock>& blocks);

} // namespace streamrec
