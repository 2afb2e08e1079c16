#include <doctest.h>

#include <cstring>
#include <thread>
#include <vector>

#include "dosediff/ops.hpp"
#include "dosediff/tensor.hpp"
#include "testutil.hpp"

using namespace dosediff;

TEST_CASE("tensor shape/data invariants") {
  Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.at({1, 2}) == 6.0f);
  CHECK_THROWS_AS(Tensor::from_data({2, 3}, {1, 2, 3}), ContractError);
  CHECK_THROWS_AS(Tensor::zeros({0, 3}), ContractError);
  CHECK_THROWS_AS(Tensor::scalar(1.0f).at({1}), ContractError);
}

TEST_CASE("stack and take_slice round-trip") {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
  std::vector<Tensor> items = {a, b};
  Tensor s = stack(items);
  CHECK(s.shape() == Shape{2, 2, 2});
  Tensor back = take_slice(s, 1);
  CHECK(back.shape() == Shape{2, 2});
  CHECK(std::memcmp(back.data().data(), b.data().data(), 4 * sizeof(float)) == 0);
}

TEST_CASE("backward: quadratic loss gives grad 2w") {
  Tensor w = Tensor::from_data({4}, {1.0f, -2.0f, 0.5f, 3.0f});
  w.set_requires_grad(true);
  GradientTape tape;
  Tensor loss = sum(mul(w, w));
  tape.backward(loss);
  for (int i = 0; i < 4; ++i) {
    CHECK(w.grad()[static_cast<std::size_t>(i)] ==
          doctest::Approx(2.0f * w.data()[static_cast<std::size_t>(i)]));
  }
}

TEST_CASE("backward: unreachable leaf gets zero grad") {
  Tensor w = Tensor::from_data({3}, {1, 2, 3});
  w.set_requires_grad(true);
  Tensor other = Tensor::from_data({3}, {4, 5, 6});
  other.set_requires_grad(true);
  GradientTape tape;
  Tensor loss = sum(mul(other, other));
  tape.backward(loss);
  for (float g : w.grad()) CHECK(g == 0.0f);
  // The participating leaf is populated.
  CHECK(other.grad()[0] == doctest::Approx(8.0f));
}

TEST_CASE("backward rejects non-scalar losses and missing tapes") {
  Tensor w = Tensor::from_data({2}, {1, 2});
  w.set_requires_grad(true);
  {
    GradientTape tape;
    Tensor y = mul(w, w);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
  }
  CHECK_THROWS_AS(backward(Tensor::scalar(0.0f)), ContractError);
}

TEST_CASE("backward populates each leaf exactly once per call") {
  Tensor w = Tensor::from_data({2}, {3.0f, -1.0f});
  w.set_requires_grad(true);
  GradientTape tape;
  Tensor y = add(mul(w, w), w);  // dy/dw = 2w + 1
  Tensor loss = sum(y);
  tape.backward(loss);
  std::vector<float> first(w.grad().begin(), w.grad().end());
  tape.backward(loss);  // replay must not accumulate on top of the first pass
  for (int i = 0; i < 2; ++i) {
    CHECK(w.grad()[static_cast<std::size_t>(i)] == first[static_cast<std::size_t>(i)]);
    CHECK(first[static_cast<std::size_t>(i)] ==
          doctest::Approx(2.0f * w.data()[static_cast<std::size_t>(i)] + 1.0f));
  }
}

TEST_CASE("ops do not record without an active tape") {
  Tensor w = Tensor::from_data({2}, {1, 2});
  w.set_requires_grad(true);
  Tensor y = mul(w, w);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("disjoint tapes run concurrently") {
  auto worker = [](float seed, std::vector<float>& out) {
    for (int rep = 0; rep < 200; ++rep) {
      Tensor w = Tensor::from_data({16}, std::vector<float>(16, seed));
      w.set_requires_grad(true);
      GradientTape tape;
      Tensor loss = sum(mul(w, w));
      tape.backward(loss);
      out.assign(w.grad().begin(), w.grad().end());
    }
  };
  std::vector<float> a, b;
  std::thread ta(worker, 1.5f, std::ref(a));
  std::thread tb(worker, -2.0f, std::ref(b));
  ta.join();
  tb.join();
  for (float g : a) CHECK(g == doctest::Approx(3.0f));
  for (float g : b) CHECK(g == doctest::Approx(-4.0f));
}

TEST_CASE("shared value semantics: copies view the same buffer") {
  Tensor a = Tensor::from_data({2}, {1, 2});
  Tensor b = a;
  b.mutable_data()[0] = 9.0f;
  CHECK(a.data()[0] == 9.0f);
}
