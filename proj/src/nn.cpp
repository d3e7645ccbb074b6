// Copyright 2026 The rrsbi Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "rrsbi/nn.hpp"

namespace rrsbi::nn {

namespace {
constexpr std::uint32_t kCheckpointVersion = 1;
}

void write_checkpoint(std::ostream& out, const std::vector<NamedTensor>& tensors) {
  le::put_magic(out, "UNWT");
  le::put<std::uint32_t>(out, kCheckpointVersion);
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    std::size_t count = 1;
    for (auto d : t.shape) count *= d;
    if (count != t.data.size()) fail(ErrorKind::Shape, "tensor " + t.name + " data does not match its shape");
    le::put_string(out, t.name);
    le::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) le::put<std::uint32_t>(out, d);
    for (float v : t.data) le::put<float>(out, v);
  }
  if (!out) fail(ErrorKind::Io, "failed writing checkpoint");
}

std::vector<NamedTensor> read_checkpoint(std::istream& in) {
  le::expect_magic(in, "UNWT");
  const auto version = le::get<std::uint32_t>(in);
  if (version != kCheckpointVersion)
    fail(ErrorKind::Io, "unsupported checkpoint version " + std::to_string(version));
  const auto count = le::get<std::uint32_t>(in);
  if (count > 100000) fail(ErrorKind::Io, "checkpoint layer count is implausible");
  std::vector<NamedTensor> tensors(count);
  for (auto& t : tensors) {
    t.name = le::get_string(in, 4096);
    const auto rank = le::get<std::uint32_t>(in);
    if (rank == 0 || rank > 8) fail(ErrorKind::Io, "tensor " + t.name + " has invalid rank");
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.shape.push_back(le::get<std::uint32_t>(in));
      n *= t.shape.back();
    }
    if (n > (std::size_t{1} << 32)) fail(ErrorKind::Io, "tensor " + t.name + " is implausibly large");
    t.data.resize(n);
    for (auto& v : t.data) v = le::get<float>(in);
  }
  return tensors;
}

}  // namespace rrsbi::nn
