#include <doctest.h>

#include "dhen/features.hpp"
#include "support.hpp"

using namespace dhen;
using dhen::testing::grad_check;
using dhen::testing::random_batch;
using dhen::testing::random_projection;
using dhen::testing::random_tensor;

namespace {

std::shared_ptr<const IdBags> bags(IdBags b) { return std::make_shared<const IdBags>(std::move(b)); }

}  // namespace

TEST_CASE("lookup indexes and sum-pools rows") {
  Rng rng(1);
  EmbeddingTable table("t", 3, 4, rng);
  Tape tape;
  Var single = table.lookup(tape, bags({{2}}));
  for (std::size_t j = 0; j < 4; ++j) CHECK(single.value()[j] == table.values().value.at({2, j}));
  Var multi = table.lookup(tape, bags({{0, 1}}));
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(multi.value()[j] == table.values().value.at({0, j}) + table.values().value.at({1, j}));
  }
}

TEST_CASE("lookup gradient touches only the looked-up rows") {
  Rng rng(2);
  EmbeddingTable table("t", 4, 3, rng);
  Tape tape;
  tape.backward(sum(table.lookup(tape, bags({{1}}))).id());
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t j = 0; j < 3; ++j) CHECK(table.values().grad.at({r, j}) == (r == 1 ? 1.0 : 0.0));
  }
}

TEST_CASE("gradient sparsity over a batch") {
  Rng rng(3);
  EmbeddingTable table("t", 10, 4, rng);
  Tape tape;
  tape.backward(random_projection(tape, table.lookup(tape, bags({{1, 7}, {3}, {7}})), 4).id());
  for (std::size_t r = 0; r < 10; ++r) {
    const bool touched = r == 1 || r == 3 || r == 7;
    bool any = false;
    for (std::size_t j = 0; j < 4; ++j) any = any || table.values().grad.at({r, j}) != 0.0;
    CHECK(any == touched);
  }
}

TEST_CASE("out-of-range id names the table and id") {
  Rng rng(4);
  EmbeddingTable table("user_country", 3, 2, rng);
  Tape tape;
  try {
    table.lookup(tape, bags({{0}, {5}}));
    FAIL("expected an error");
  } catch (const std::out_of_range& e) {
    const std::string msg = e.what();
    CHECK(msg.find("user_country") != std::string::npos);
    CHECK(msg.find('5') != std::string::npos);
  }
}

TEST_CASE("embedding init is uniform in +-1/sqrt(d)") {
  Rng rng(5);
  EmbeddingTable table("t", 500, 16, rng);
  double lo = 1.0, hi = -1.0;
  for (double v : table.values().value.values()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(hi <= 0.25);
  CHECK(lo >= -0.25);
  CHECK(hi > 0.24);
  CHECK(lo < -0.24);
}

TEST_CASE("dense arch: zero weights give the bias; identity passes through") {
  Rng rng(6);
  DenseArch arch(3, {}, 3, rng);
  Tape tape;
  Var x = tape.constant(random_tensor({2, 3}, rng));
  arch.weights()[0].value.fill(0.0);
  arch.biases()[0].value = Tensor({3}, {1.0, -2.0, 0.5});
  CHECK(arch.forward(tape, x).value().values() == std::vector<double>{1.0, -2.0, 0.5, 1.0, -2.0, 0.5});
  arch.weights()[0].value = Tensor::identity(3);
  arch.biases()[0].value.fill(0.0);
  CHECK(arch.forward(tape, x).value().values() == x.value().values());
  CHECK_THROWS_AS(arch.forward(tape, tape.constant(Tensor({2, 4}))), ShapeError);
}

TEST_CASE("dense arch relu sits between layers only") {
  Rng rng(7);
  DenseArch arch(1, {1}, 1, rng);
  arch.weights()[0].value.fill(1.0);
  arch.biases()[0].value.fill(0.0);
  arch.weights()[1].value.fill(-1.0);
  arch.biases()[1].value.fill(0.0);
  Tape tape;
  // Hidden relu clips -2 to 0; the output layer may still go negative.
  CHECK(arch.forward(tape, tape.constant(Tensor({2, 1}, {-2.0, 3.0}))).value().values() ==
        std::vector<double>{0.0, -3.0});
}

TEST_CASE("dense arch gradients match finite differences") {
  Rng rng(8);
  DenseArch arch(4, {6, 5}, 3, rng);
  const Tensor x = random_tensor({5, 4}, rng);
  Rng pick(0);
  const auto r = grad_check([&](Tape& t) { return random_projection(t, arch.forward(t, t.constant(x)), 1); },
                            arch.parameters(), 200, pick);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("assemble_x0 counts, orders and round-trips") {
  Rng rng(9);
  Tape tape;
  std::vector<Var> sparse;
  for (int i = 0; i < 3; ++i) sparse.push_back(tape.constant(random_tensor({2, 4}, rng)));
  Var dense = tape.constant(random_tensor({2, 4}, rng));
  EmbeddingBundle x = assemble_x0(sparse, dense);
  CHECK(x.count() == 4);
  CHECK(x.dim() == 4);
  CHECK(x.batch() == 2);
  for (std::size_t i = 0; i < 4; ++i) {
    Var part = reshape(slice(x.tensor(), 1, i, i + 1), {2, 4});
    CHECK(part.value() == (i < 3 ? sparse[i] : dense).value());
  }
  CHECK(assemble_x0({}, dense).count() == 1);
  const Var bad[] = {tape.constant(Tensor({2, 3}))};
  CHECK_THROWS_AS(assemble_x0(bad, dense), ShapeError);
}

TEST_CASE("feature processor: m and d independent of batch size") {
  FeatureConfig cfg;
  cfg.dim = 6;
  cfg.dense_width = 3;
  cfg.dense_hidden = {5};
  cfg.sparse = {{"a", 10}, {"b", 20}};
  Rng rng(10);
  FeatureProcessor fp(cfg, rng);
  for (std::size_t batch : {1, 4, 9}) {
    Tape tape;
    Rng data(batch);
    EmbeddingBundle x = fp.forward(tape, random_batch(cfg, batch, data, 2));
    CHECK(x.batch() == batch);
    CHECK(x.count() == 3);
    CHECK(x.dim() == 6);
  }
  CHECK(fp.parameters().size() == 2 + 4);
}

TEST_CASE("feature batch validation") {
  FeatureConfig cfg;
  cfg.sparse = {{"a", 3}};
  Rng rng(11);
  FeatureBatch b = random_batch(cfg, 2, rng);
  CHECK_NOTHROW(b.validate(cfg));
  b.batch_size = 3;
  CHECK_THROWS(b.validate(cfg));
  FeatureConfig bad = cfg;
  bad.dim = 0;
  CHECK_THROWS(bad.validate());
}
