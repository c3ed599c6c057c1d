// Copyright 2026 The kpn-coherence Authors. All Rights Reserved.
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

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "kpn/dataset.hpp"
#include "kpn/gmm.hpp"
#include "kpn/persist.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
};

RunResult run(const std::string& args) {
  const std::string cmd = std::string(KPN_CLI_PATH) + " " + args + " 2>/dev/null";
  RunResult r;
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path scratch(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("kpn_cli_" + name);
  fs::remove_all(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t count_lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

const char* kTinyConfig = "epochs = 2\nbatch_size = 8\nlr = 3e-3\nlr_decay_epochs = 1\nwarmup_epochs = 1\nk = 3\n";

}  // namespace

TEST_CASE("usage errors") {
  CHECK(run("--help").code == 0);
  CHECK(run("").code == 1);
  CHECK(run("frobnicate").code == 1);
  CHECK(run("synth --out /tmp/kpn_cli_unused --bogus-flag").code == 1);
  CHECK(run("synth --out /tmp/kpn_cli_unused --label-fraction 1.5").code == 1);
  CHECK(run("synth --out /tmp/kpn_cli_unused --label-fraction 0").code == 1);
  CHECK(run("fit-gmm --grades x.csv --out y.kpnt --k 0").code == 1);
  CHECK(run("gradcheck --op no_such_op").code == 1);
  CHECK(run("fit-gmm --grades /nonexistent/grades.csv --out /tmp/kpn_cli_unused.kpnt").code == 2);
}

TEST_CASE("synth, fit-gmm, score, train, eval") {
  const auto d = scratch("pipeline");
  const auto r = run("synth --out " + d.string() + " --n 400 --label-fraction 0.2 --seed 3 --image-side 16");
  REQUIRE(r.code == 0);
  CHECK(r.out.find("labeled = 80") != std::string::npos);
  const auto m = kpn::read_manifest(d / "manifest.txt");
  CHECK(m.at("labeled") == "80");
  CHECK(m.at("unlabeled") == "320");
  CHECK(run("synth --out " + d.string() + " --n 40 --seed 3").code == 1);

  const auto d2 = scratch("pipeline_again");
  REQUIRE(run("synth --out " + d2.string() + " --n 400 --label-fraction 0.2 --seed 3 --image-side 16").code == 0);
  CHECK(kpn::read_manifest(d2 / "manifest.txt") == m);
  const auto d3 = scratch("pipeline_other");
  REQUIRE(run("synth --out " + d3.string() + " --n 400 --label-fraction 0.2 --seed 4 --image-side 16").code == 0);
  CHECK(kpn::read_manifest(d3 / "manifest.txt").at("hash.images.kpnt") != m.at("hash.images.kpnt"));

  const auto gmm = d / "gmm.kpnt";
  const std::string fit = "fit-gmm --grades " + (d / "grades.csv").string() + " --splits " +
                          (d / "splits.csv").string() + " --seed 1 --out ";
  REQUIRE(run(fit + gmm.string()).code == 0);
  REQUIRE(run(fit + (d / "nested" / "dir" / "gmm2.kpnt").string()).code == 0);
  CHECK(slurp(gmm) == slurp(d / "nested" / "dir" / "gmm2.kpnt"));
  const auto model = kpn::gmm_from_container(kpn::read_container(gmm));
  CHECK(model.k() == 10);
  CHECK(model.dim() == 29);

  const auto score = run("score --gmm " + gmm.string() + " --grades " + (d / "truth.csv").string() + " --seed 2");
  REQUIRE(score.code == 0);
  const auto pos_c = score.out.find("mean_loss_coherent = ");
  const auto pos_s = score.out.find("mean_loss_shuffled = ");
  REQUIRE(pos_c != std::string::npos);
  REQUIRE(pos_s != std::string::npos);
  const double coherent = std::stod(score.out.substr(pos_c + 21));
  const double shuffled = std::stod(score.out.substr(pos_s + 21));
  CHECK(coherent < shuffled);

  const auto cfg = d / "tiny.cfg";
  write_text(cfg, kTinyConfig);
  const auto ckpt = d / "model.kpnt";
  const auto summary = d / "summary.csv";
  const std::string train = "train --data " + d.string() + " --config " + cfg.string() + " --summary " +
                            summary.string() + " --seed 5 ";
  CHECK(run(train + "--out " + ckpt.string()).code == 1);  // no --gmm
  REQUIRE(run(train + "--gmm " + gmm.string() + " --out " + ckpt.string()).code == 0);
  REQUIRE(run(train + "--gmm " + gmm.string() + " --out " + (d / "again.kpnt").string()).code == 0);
  CHECK(slurp(ckpt) == slurp(d / "again.kpnt"));
  CHECK(slurp(fs::path(ckpt.string() + ".metrics.csv")) == slurp(d / "again.kpnt.metrics.csv"));
  CHECK(count_lines(slurp(fs::path(ckpt.string() + ".metrics.csv"))) == 3);
  REQUIRE(run(train + "--no-kpn --no-coherence --out " + (d / "base.kpnt").string()).code == 0);
  const auto rows = slurp(summary);
  CHECK(count_lines(rows) == 4);
  CHECK(rows.find("\nglobal,") != std::string::npos);

  write_text(d / "bad.cfg", "epochs = 2\nlearning_rate = 1\n");
  CHECK(run("train --data " + d.string() + " --config " + (d / "bad.cfg").string() + " --no-coherence --out " +
            (d / "x.kpnt").string())
            .code == 1);

  const auto report = d / "report.txt";
  const auto ev = run("eval --data " + d.string() + " --ckpt " + ckpt.string() + " --report " + report.string());
  REQUIRE(ev.code == 0);
  CHECK(count_lines(ev.out) == 2);
  const auto rep = kpn::read_manifest(report);
  CHECK(rep.count("kl.accuracy") + rep.count("kl_accuracy") >= 1);

  // Corrupt checkpoint: data error.
  write_text(d / "corrupt.kpnt", "KPNT garbage");
  CHECK(run("eval --data " + d.string() + " --ckpt " + (d / "corrupt.kpnt").string()).code == 2);

  for (const auto& p : {d, d2, d3}) fs::remove_all(p);
}

TEST_CASE("gradcheck and labelfrac") {
  const auto g = run("gradcheck --op relu --seeds 2 --instances 3");
  CHECK(g.code == 0);
  CHECK(g.out.find("PASS relu") != std::string::npos);

  const auto d = scratch("labelfrac");
  REQUIRE(run("synth --out " + d.string() + " --n 80 --seed 1 --image-side 16").code == 0);
  write_text(d / "tiny.cfg", kTinyConfig);
  const auto lf = run("labelfrac --data " + d.string() + " --config " + (d / "tiny.cfg").string() +
                      " --fractions 0.2,0.4,1.0 --seed 1");
  REQUIRE(lf.code == 0);
  CHECK(count_lines(lf.out) == 7);
  CHECK(lf.out.rfind("fraction,arm,labeled,", 0) == 0);
  CHECK(run("labelfrac --data " + d.string() + " --fractions 0.2,1.5").code == 1);
  fs::remove_all(d);
}
